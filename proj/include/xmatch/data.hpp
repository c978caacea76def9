#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xmatch/errors.hpp"
#include "xmatch/util.hpp"

namespace xmatch {

enum class Modality { Vis, Ir };

inline const char* to_string(Modality m) { return m == Modality::Vis ? "vis" : "ir"; }

inline Modality other(Modality m) { return m == Modality::Vis ? Modality::Ir : Modality::Vis; }

/// Sentinel for "no counterpart" in identity maps.
inline constexpr int kNoMatch = -1;

struct LabeledSample {
  Eigen::VectorXd features;
  Modality modality = Modality::Vis;
  int identity = 0;

  friend bool operator==(const LabeledSample& a, const LabeledSample& b) {
    return a.modality == b.modality && a.identity == b.identity &&
           a.features.size() == b.features.size() && a.features == b.features;
  }
};

struct Dataset {
  std::vector<LabeledSample> samples;
  int num_ids_vis = 0;
  int num_ids_ir = 0;
  /// alignment[v] = infrared identity of visible identity v, or kNoMatch. Synthetic data only.
  std::optional<std::vector<int>> ground_truth_alignment;

  int num_ids(Modality m) const { return m == Modality::Vis ? num_ids_vis : num_ids_ir; }

  Eigen::Index input_dim() const { return samples.empty() ? 0 : samples.front().features.size(); }

  /// Indices into `samples` of every sample of modality m.
  std::vector<std::size_t> indices_of(Modality m) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].modality == m) out.push_back(i);
    return out;
  }

  /// by_identity(m)[id] lists sample indices of identity id in modality m.
  std::vector<std::vector<std::size_t>> by_identity(Modality m) const {
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(num_ids(m)));
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].modality == m) out[static_cast<std::size_t>(samples[i].identity)].push_back(i);
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Throws if the dataset violates its structural invariants.
inline void validate(const Dataset& d) {
  if (d.num_ids_vis < 0 || d.num_ids_ir < 0) throw DimensionError("negative identity count");
  const auto dim = d.input_dim();
  std::vector<char> seen_v(static_cast<std::size_t>(d.num_ids_vis), 0);
  std::vector<char> seen_r(static_cast<std::size_t>(d.num_ids_ir), 0);
  for (const auto& s : d.samples) {
    if (s.features.size() != dim) throw DimensionError("inconsistent feature dimension");
    if (!s.features.allFinite()) throw FormatError("non-finite feature value");
    auto& seen = s.modality == Modality::Vis ? seen_v : seen_r;
    if (s.identity < 0 || s.identity >= static_cast<int>(seen.size()))
      throw DimensionError("identity " + std::to_string(s.identity) + " out of range for modality " +
                           to_string(s.modality));
    seen[static_cast<std::size_t>(s.identity)] = 1;
  }
  if (std::find(seen_v.begin(), seen_v.end(), 0) != seen_v.end() ||
      std::find(seen_r.begin(), seen_r.end(), 0) != seen_r.end())
    throw DimensionError("an identity index has no samples");
  if (d.ground_truth_alignment) {
    const auto& a = *d.ground_truth_alignment;
    if (static_cast<int>(a.size()) != d.num_ids_vis) throw DimensionError("alignment size != C^v");
    std::vector<char> used(static_cast<std::size_t>(d.num_ids_ir), 0);
    for (int r : a) {
      if (r == kNoMatch) continue;
      if (r < 0 || r >= d.num_ids_ir) throw DimensionError("alignment target out of range");
      if (used[static_cast<std::size_t>(r)]) throw ConfigError("alignment is not injective");
      used[static_cast<std::size_t>(r)] = 1;
    }
  }
}

struct SynthConfig {
  int num_identities = 20;
  /// Infrared identity count; 0 means equal to num_identities.
  int num_identities_ir = 0;
  int samples_per_id_per_modality = 30;
  int latent_dim = 8;
  int input_dim = 16;
  /// Norm of each modality's constant input-space offset.
  double modality_gap = 1.0;
  double noise_sigma = 0.8;
  /// Scale of the per-modality perturbation applied to the shared latent-to-input map. 0 gives identical maps.
  double transform_jitter = 0.5;
  /// Number of trailing latent dimensions zeroed before the infrared map (information loss on one side).
  int ir_dropped_latent_dims = 0;
  std::uint64_t transform_seed = 7;
  std::uint64_t id_permutation_seed = 11;
  std::uint64_t sample_seed = 13;

  int ir_identities() const { return num_identities_ir > 0 ? num_identities_ir : num_identities; }

  void validate() const {
    if (num_identities < 2) throw ConfigError("num_identities must be >= 2");
    if (num_identities_ir != 0 && num_identities_ir < 2) throw ConfigError("num_identities_ir must be >= 2");
    if (samples_per_id_per_modality < 2) throw ConfigError("samples_per_id_per_modality must be >= 2");
    if (latent_dim < 1 || input_dim < 1) throw ConfigError("dimensions must be positive");
    if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) throw ConfigError("noise_sigma must be >= 0");
    if (!(modality_gap >= 0) || !std::isfinite(modality_gap)) throw ConfigError("modality_gap must be >= 0");
    if (!(transform_jitter >= 0) || !std::isfinite(transform_jitter))
      throw ConfigError("transform_jitter must be >= 0");
    if (ir_dropped_latent_dims < 0 || ir_dropped_latent_dims >= latent_dim)
      throw ConfigError("ir_dropped_latent_dims must be in [0, latent_dim)");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"num_identities", c.num_identities},
       {"num_identities_ir", c.num_identities_ir},
       {"samples_per_id_per_modality", c.samples_per_id_per_modality},
       {"latent_dim", c.latent_dim},
       {"input_dim", c.input_dim},
       {"modality_gap", c.modality_gap},
       {"noise_sigma", c.noise_sigma},
       {"transform_jitter", c.transform_jitter},
       {"ir_dropped_latent_dims", c.ir_dropped_latent_dims},
       {"transform_seed", c.transform_seed},
       {"id_permutation_seed", c.id_permutation_seed},
       {"sample_seed", c.sample_seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.num_identities = j.value("num_identities", c.num_identities);
  c.num_identities_ir = j.value("num_identities_ir", c.num_identities_ir);
  c.samples_per_id_per_modality = j.value("samples_per_id_per_modality", c.samples_per_id_per_modality);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.modality_gap = j.value("modality_gap", c.modality_gap);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.transform_jitter = j.value("transform_jitter", c.transform_jitter);
  c.ir_dropped_latent_dims = j.value("ir_dropped_latent_dims", c.ir_dropped_latent_dims);
  c.transform_seed = j.value("transform_seed", c.transform_seed);
  c.id_permutation_seed = j.value("id_permutation_seed", c.id_permutation_seed);
  c.sample_seed = j.value("sample_seed", c.sample_seed);
}

namespace detail {

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = n01(rng);
  return m;
}

}  // namespace detail

/// Draws latent identity centers and maps them into two modalities through related but distinct
/// affine maps. Infrared identity indices are a seeded permutation of the visible ones.
///
/// Persons 0..min(C^v,C^r)-1 exist in both modalities; any surplus persons exist in one modality
/// only and are left unaligned.
inline Dataset generate_synthetic(const SynthConfig& config) {
  config.validate();
  const int cv = config.num_identities;
  const int cr = config.ir_identities();
  const int shared = std::min(cv, cr);
  const Eigen::Index latent = config.latent_dim;
  const Eigen::Index in_dim = config.input_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(latent));

  std::mt19937_64 trng(config.transform_seed);
  const Eigen::MatrixXd base = detail::gaussian_matrix(in_dim, latent, trng) * scale;
  Eigen::MatrixXd maps[2];
  Eigen::VectorXd offsets[2];
  for (int m = 0; m < 2; ++m) {
    maps[m] = base + config.transform_jitter * scale * detail::gaussian_matrix(in_dim, latent, trng);
    Eigen::VectorXd dir = detail::gaussian_matrix(in_dim, 1, trng).col(0);
    const double n = dir.norm();
    offsets[m] = n > 0 ? Eigen::VectorXd(dir * (config.modality_gap / n)) : Eigen::VectorXd::Zero(in_dim);
  }

  std::vector<int> perm(static_cast<std::size_t>(cr));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 prng(config.id_permutation_seed);
  std::shuffle(perm.begin(), perm.end(), prng);

  // Person p < cv is visible identity p; person p < shared is also infrared identity perm[p];
  // infrared-only persons follow the visible ones.
  const int persons = cv + (cr - shared);
  std::mt19937_64 srng(config.sample_seed);
  const Eigen::MatrixXd centers = detail::gaussian_matrix(latent, persons, srng);
  std::normal_distribution<double> n01(0.0, 1.0);

  Dataset d;
  d.num_ids_vis = cv;
  d.num_ids_ir = cr;
  const int k = config.samples_per_id_per_modality;
  d.samples.reserve(static_cast<std::size_t>((cv + cr) * k));

  auto emit = [&](Modality m, int identity, int person) {
    const int mi = m == Modality::Vis ? 0 : 1;
    Eigen::VectorXd z = centers.col(person);
    if (m == Modality::Ir && config.ir_dropped_latent_dims > 0)
      z.tail(config.ir_dropped_latent_dims).setZero();
    const Eigen::VectorXd clean = maps[mi] * z + offsets[mi];
    for (int s = 0; s < k; ++s) {
      Eigen::VectorXd x = clean;
      for (Eigen::Index i = 0; i < in_dim; ++i) x(i) += config.noise_sigma * n01(srng);
      d.samples.push_back({std::move(x), m, identity});
    }
  };

  for (int v = 0; v < cv; ++v) emit(Modality::Vis, v, v);
  std::vector<int> person_of_ir(static_cast<std::size_t>(cr));
  for (int p = 0; p < shared; ++p) person_of_ir[static_cast<std::size_t>(perm[static_cast<std::size_t>(p)])] = p;
  for (int p = shared; p < cr; ++p)
    person_of_ir[static_cast<std::size_t>(perm[static_cast<std::size_t>(p)])] = cv + (p - shared);
  for (int r = 0; r < cr; ++r) emit(Modality::Ir, r, person_of_ir[static_cast<std::size_t>(r)]);

  std::vector<int> alignment(static_cast<std::size_t>(cv), kNoMatch);
  for (int p = 0; p < shared; ++p) alignment[static_cast<std::size_t>(p)] = perm[static_cast<std::size_t>(p)];
  d.ground_truth_alignment = std::move(alignment);
  return d;
}

/// Path of the JSON sidecar holding identity counts and ground-truth alignment for a CSV dataset.
inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".meta.json");
}

/// Writes `modality,identity,f0,...` CSV plus a `.meta.json` sidecar. Values use the shortest
/// decimal form that round-trips exactly.
inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  if (d.samples.empty()) throw FormatError("refusing to write a dataset with no samples");
  validate(d);
  std::ostringstream os;
  const auto dim = d.input_dim();
  os << "modality,identity";
  for (Eigen::Index i = 0; i < dim; ++i) os << ",f" << i;
  os << '\n';
  for (const auto& s : d.samples) {
    os << to_string(s.modality) << ',' << s.identity;
    for (Eigen::Index i = 0; i < dim; ++i) os << ',' << format_double(s.features(i));
    os << '\n';
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << os.str();
  if (!out) throw IoError("write failed: " + path.string());

  nlohmann::json meta = {{"num_ids_vis", d.num_ids_vis}, {"num_ids_ir", d.num_ids_ir}};
  meta["alignment"] = d.ground_truth_alignment ? nlohmann::json(*d.ground_truth_alignment) : nlohmann::json();
  std::ofstream mout(sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!mout) throw IoError("cannot open " + sidecar_path(path).string() + " for writing");
  mout << meta.dump(2) << '\n';
  if (!mout) throw IoError("write failed: " + sidecar_path(path).string());
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Parses a dataset CSV. Identity counts come from the sidecar when present, otherwise from the
/// largest identity seen per modality.
inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  std::string line;
  long lineno = 0;
  if (!std::getline(in, line)) throw FormatError("empty file", 1);
  ++lineno;
  {
    const auto cols = detail::split_commas(line);
    if (cols.size() < 3 || cols[0] != "modality" || cols[1] != "identity")
      throw FormatError("expected header 'modality,identity,f0,...'", lineno);
    for (std::size_t i = 2; i < cols.size(); ++i)
      if (cols[i] != "f" + std::to_string(i - 2)) throw FormatError("bad feature column name", lineno);
  }
  const auto dim = static_cast<Eigen::Index>(detail::split_commas(line).size() - 2);

  Dataset d;
  int max_v = -1;
  int max_r = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = detail::split_commas(line);
    if (static_cast<Eigen::Index>(cols.size()) != dim + 2)
      throw DimensionError("line " + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                           " features, got " + std::to_string(static_cast<long>(cols.size()) - 2));
    LabeledSample s;
    if (cols[0] == "vis") s.modality = Modality::Vis;
    else if (cols[0] == "ir") s.modality = Modality::Ir;
    else throw FormatError("unknown modality '" + std::string(cols[0]) + "'", lineno);
    long long id = 0;
    if (!parse_int(cols[1], id) || id < 0 || id > 1'000'000'000)
      throw FormatError("bad identity '" + std::string(cols[1]) + "'", lineno);
    s.identity = static_cast<int>(id);
    s.features.resize(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      double v = 0;
      if (!parse_double(cols[static_cast<std::size_t>(i + 2)], v)) throw FormatError("bad number", lineno);
      if (!std::isfinite(v)) throw FormatError("non-finite feature value", lineno);
      s.features(i) = v;
    }
    (s.modality == Modality::Vis ? max_v : max_r) =
        std::max(s.modality == Modality::Vis ? max_v : max_r, s.identity);
    d.samples.push_back(std::move(s));
  }
  if (d.samples.empty()) throw FormatError("no samples", lineno);

  d.num_ids_vis = max_v + 1;
  d.num_ids_ir = max_r + 1;
  const auto meta_path = sidecar_path(path);
  if (std::filesystem::exists(meta_path)) {
    std::ifstream min(meta_path, std::ios::binary);
    nlohmann::json meta;
    try {
      min >> meta;
      d.num_ids_vis = meta.at("num_ids_vis").get<int>();
      d.num_ids_ir = meta.at("num_ids_ir").get<int>();
      if (!meta.at("alignment").is_null()) d.ground_truth_alignment = meta.at("alignment").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(meta_path.string() + ": " + e.what());
    }
  }
  validate(d);
  return d;
}

}  // namespace xmatch
