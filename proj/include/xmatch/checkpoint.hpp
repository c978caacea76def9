#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xmatch/errors.hpp"
#include "xmatch/model.hpp"
#include "xmatch/prototypes.hpp"
#include "xmatch/util.hpp"

namespace xmatch {

/// Model parameters, optional prototype bank and string metadata (config JSON, config hash,
/// variant). Layout is documented in docs/checkpoint_format.md.
struct Checkpoint {
  ModelState model;
  std::optional<PrototypeBank> prototypes;
  std::map<std::string, std::string> metadata;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr char kCheckpointMagic[8] = {'X', 'M', 'A', 'T', 'C', 'H', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void tensor(const std::string& name, const Eigen::MatrixXd& m) {
    str(name);
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    raw(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view b) : b_(b) {}
  void raw(void* p, std::size_t n) {
    if (n > b_.size() - pos_) throw ChecksumError("checkpoint truncated");
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = u32();
    if (n > b_.size() - pos_) throw ChecksumError("checkpoint truncated");
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::pair<std::string, Eigen::MatrixXd> tensor() {
    std::string name = str();
    const auto rows = u32();
    const auto cols = u32();
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    if (n > (b_.size() - pos_) / sizeof(double)) throw ChecksumError("checkpoint truncated");
    Eigen::MatrixXd m(rows, cols);
    raw(m.data(), n * sizeof(double));
    return {std::move(name), std::move(m)};
  }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.metadata.size()));
  for (const auto& [k, v] : ck.metadata) {
    w.str(k);
    w.str(v);
  }
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;
  visit_params([&](const std::string& name, bool, const auto& t) { tensors.emplace_back(name, Eigen::MatrixXd(t)); },
               ck.model);
  if (ck.prototypes) {
    const auto& b = *ck.prototypes;
    auto flags = [](const std::vector<char>& f) {
      Eigen::MatrixXd m(1, static_cast<Eigen::Index>(f.size()));
      for (std::size_t i = 0; i < f.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = f[i] ? 1.0 : 0.0;
      return m;
    };
    tensors.emplace_back("prototypes.vis", b.protos_vis);
    tensors.emplace_back("prototypes.ir", b.protos_ir);
    tensors.emplace_back("prototypes.initialized_vis", flags(b.initialized_vis));
    tensors.emplace_back("prototypes.initialized_ir", flags(b.initialized_ir));
    tensors.emplace_back("prototypes.momentum", Eigen::MatrixXd::Constant(1, 1, b.momentum));
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) w.tensor(name, t);
  std::string out = w.bytes();
  const std::uint64_t sum = fnv1a64(out);
  out.append(reinterpret_cast<const char*>(&sum), sizeof sum);
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 8) throw ChecksumError("checkpoint too short");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof stored, sizeof stored);
  const std::string_view body = bytes.substr(0, bytes.size() - sizeof stored);
  if (fnv1a64(body) != stored) throw ChecksumError("checkpoint checksum mismatch");
  detail::ByteReader r(body);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw ChecksumError("not a checkpoint file");
  if (r.u32() != kCheckpointVersion) throw ChecksumError("unsupported checkpoint version");

  Checkpoint ck;
  const auto nmeta = r.u32();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    ck.metadata[k] = r.str();
  }
  std::map<std::string, Eigen::MatrixXd> tensors;
  const auto nt = r.u32();
  for (std::uint32_t i = 0; i < nt; ++i) tensors.insert(r.tensor());

  auto take = [&](const std::string& name) -> Eigen::MatrixXd {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ChecksumError("checkpoint missing tensor " + name);
    return it->second;
  };
  auto layers = [&](const std::string& prefix) {
    std::vector<AffineLayer> out;
    for (int i = 0; tensors.count(prefix + "." + std::to_string(i) + ".weight"); ++i) {
      const std::string base = prefix + "." + std::to_string(i);
      out.push_back({take(base + ".weight"), take(base + ".bias").col(0)});
    }
    return out;
  };
  ck.model.front_vis = layers("front_vis");
  ck.model.front_ir = layers("front_ir");
  ck.model.trunk = layers("trunk");
  if (ck.model.trunk.empty()) throw ChecksumError("checkpoint has no trunk layers");
  for (const char* c : {"expert_vis", "expert_ir", "shared_cls"}) {
    Classifier cls{take(std::string(c) + ".weight"), take(std::string(c) + ".bias").col(0)};
    if (std::string(c) == "expert_vis") ck.model.expert_vis = std::move(cls);
    else if (std::string(c) == "expert_ir") ck.model.expert_ir = std::move(cls);
    else ck.model.shared_cls = std::move(cls);
  }
  if (tensors.count("prototypes.vis")) {
    PrototypeBank b;
    b.protos_vis = take("prototypes.vis");
    b.protos_ir = take("prototypes.ir");
    auto flags = [](const Eigen::MatrixXd& m) {
      std::vector<char> f(static_cast<std::size_t>(m.size()));
      for (Eigen::Index i = 0; i < m.size(); ++i) f[static_cast<std::size_t>(i)] = m(i) != 0.0 ? 1 : 0;
      return f;
    };
    b.initialized_vis = flags(take("prototypes.initialized_vis"));
    b.initialized_ir = flags(take("prototypes.initialized_ir"));
    b.momentum = take("prototypes.momentum")(0, 0);
    ck.prototypes = std::move(b);
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace xmatch
