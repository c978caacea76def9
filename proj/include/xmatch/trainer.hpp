#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xmatch/cre.hpp"
#include "xmatch/data.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/gradients.hpp"
#include "xmatch/losses.hpp"
#include "xmatch/model.hpp"
#include "xmatch/prototypes.hpp"

namespace xmatch {

/// Training variants. `B` stops after expert construction; the rest add the collaborative phase
/// with different correspondence sources and with or without expert consistency.
enum class Variant { B, BCmclNoCre, BCreCmcl, Full, MrvOnly, MvrOnly };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names = {
      {Variant::B, "b"},         {Variant::BCmclNoCre, "b-cmcl-nocre"}, {Variant::BCreCmcl, "b-cre-cmcl"},
      {Variant::Full, "full"},   {Variant::MrvOnly, "mrv-only"},        {Variant::MvrOnly, "mvr-only"}};
  return names;
}

inline std::string to_string(Variant v) {
  for (const auto& [k, n] : variant_names())
    if (k == v) return n;
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (const auto& [k, n] : variant_names())
    if (n == s) return k;
  std::string valid;
  for (const auto& [k, n] : variant_names()) valid += (valid.empty() ? "" : "|") + n;
  throw ConfigError("unknown variant '" + s + "' (valid: " + valid + ")");
}

inline bool runs_phase2(Variant v) { return v != Variant::B; }
inline bool uses_consistency(Variant v) { return v == Variant::Full; }

inline CorrespondenceMode correspondence_mode(Variant v) {
  switch (v) {
    case Variant::BCmclNoCre: return CorrespondenceMode::ConsistentOnly;
    case Variant::MrvOnly: return CorrespondenceMode::IrToVisOnly;
    case Variant::MvrOnly: return CorrespondenceMode::VisToIrOnly;
    default: return CorrespondenceMode::Full;
  }
}

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
  ModelConfig model;
  double lambda1 = 0.25;
  double lambda2 = 0.25;
  double prototype_momentum = 0.8;
  double lr_encoder = 3e-4;
  double lr_classifiers = 6e-4;
  /// Multiplier on lr_encoder for the modality-specific front layers.
  double front_lr_scale = 0.1;
  int warmup_epochs = 10;
  std::vector<int> decay_epochs{30, 70};
  int phase1_epochs = 40;
  int phase2_epochs = 120;
  int batch_p = 4;
  int batch_k = 4;
  /// Optimizer steps per epoch; 0 derives it from the larger modality's sample count.
  int steps_per_epoch = 0;
  std::uint64_t seed = 1;
  int cre_refresh_every = 1;
  int min_count = 1;
  OptimizerKind optimizer = OptimizerKind::Adam;

  /// Scaled-down schedule for quick runs. The shorter schedule gets ten times the base rates so
  /// that the few hundred steps still reach a trained model.
  static TrainConfig desk_scale() {
    TrainConfig c;
    c.lr_encoder = 3e-3;
    c.lr_classifiers = 6e-3;
    c.phase1_epochs = 15;
    c.phase2_epochs = 40;
    c.warmup_epochs = 3;
    c.decay_epochs = {10, 25};
    return c;
  }

  void validate() const {
    model.validate();
    if (!(lambda1 >= 0) || !(lambda2 >= 0)) throw ConfigError("lambda1 and lambda2 must be >= 0");
    if (!(lr_encoder > 0) || !(lr_classifiers > 0)) throw ConfigError("learning rates must be positive");
    if (!(front_lr_scale >= 0)) throw ConfigError("front_lr_scale must be >= 0");
    if (!(prototype_momentum >= 0 && prototype_momentum <= 1)) throw ConfigError("prototype momentum must be in [0,1]");
    if (warmup_epochs < 0 || phase1_epochs < 0 || phase2_epochs < 0) throw ConfigError("epoch counts must be >= 0");
    for (int d : decay_epochs)
      if (d <= 0) throw ConfigError("decay epochs must be positive");
    if (batch_p < 2) throw ConfigError("batch P must be >= 2 (triplet negatives need two identities)");
    if (batch_k < 2) throw ConfigError("batch K must be >= 2 (triplet positives need two samples)");
    if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be >= 0");
    if (cre_refresh_every < 1) throw ConfigError("cre_refresh_every must be >= 1");
    if (min_count < 1) throw ConfigError("min_count must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"dims", c.model.dims},
       {"front_layers", c.model.front_layers},
       {"shared_front_init", c.model.shared_front_init},
       {"lambda1", c.lambda1},
       {"lambda2", c.lambda2},
       {"prototype_momentum", c.prototype_momentum},
       {"lr_encoder", c.lr_encoder},
       {"lr_classifiers", c.lr_classifiers},
       {"front_lr_scale", c.front_lr_scale},
       {"warmup_epochs", c.warmup_epochs},
       {"decay_epochs", c.decay_epochs},
       {"phase1_epochs", c.phase1_epochs},
       {"phase2_epochs", c.phase2_epochs},
       {"batch_p", c.batch_p},
       {"batch_k", c.batch_k},
       {"steps_per_epoch", c.steps_per_epoch},
       {"seed", c.seed},
       {"cre_refresh_every", c.cre_refresh_every},
       {"min_count", c.min_count},
       {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.model.dims = j.value("dims", c.model.dims);
  c.model.front_layers = j.value("front_layers", c.model.front_layers);
  c.model.shared_front_init = j.value("shared_front_init", c.model.shared_front_init);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.prototype_momentum = j.value("prototype_momentum", c.prototype_momentum);
  c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
  c.lr_classifiers = j.value("lr_classifiers", c.lr_classifiers);
  c.front_lr_scale = j.value("front_lr_scale", c.front_lr_scale);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
  c.phase1_epochs = j.value("phase1_epochs", c.phase1_epochs);
  c.phase2_epochs = j.value("phase2_epochs", c.phase2_epochs);
  c.batch_p = j.value("batch_p", c.batch_p);
  c.batch_k = j.value("batch_k", c.batch_k);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.seed = j.value("seed", c.seed);
  c.cre_refresh_every = j.value("cre_refresh_every", c.cre_refresh_every);
  c.min_count = j.value("min_count", c.min_count);
  const std::string opt = j.value("optimizer", std::string(c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"));
  if (opt == "adam") c.optimizer = OptimizerKind::Adam;
  else if (opt == "sgd") c.optimizer = OptimizerKind::Sgd;
  else throw ConfigError("unknown optimizer '" + opt + "'");
}

struct LearningRates {
  double encoder = 0.0;
  double classifiers = 0.0;
  /// Modality-specific front layers.
  double front = 0.0;
};

/// Linear warmup from base/10 to base over warmup_epochs, then x0.1 for every decay epoch reached.
inline LearningRates lr_at(int epoch, const TrainConfig& c) {
  double factor = 1.0;
  if (epoch < c.warmup_epochs) factor = 0.1 + 0.9 * static_cast<double>(epoch) / c.warmup_epochs;
  for (int d : c.decay_epochs)
    if (epoch >= d) factor *= 0.1;
  return {c.lr_encoder * factor, c.lr_classifiers * factor, c.lr_encoder * c.front_lr_scale * factor};
}

/// P identities per modality, K samples each, in identity-major order.
struct MiniBatch {
  std::vector<std::size_t> indices_vis;
  std::vector<std::size_t> indices_ir;
  std::vector<int> labels_vis;
  std::vector<int> labels_ir;
  Eigen::MatrixXd x_vis;
  Eigen::MatrixXd x_ir;
};

/// Identity-balanced sampling. Identities are drawn without replacement per modality; samples
/// within an identity without replacement when it has at least K, otherwise with replacement.
inline MiniBatch sample_batch(const Dataset& dataset, int p, int k, std::mt19937_64& rng) {
  if (p < 1 || k < 1) throw ConfigError("P and K must be positive");
  MiniBatch b;
  for (Modality m : {Modality::Vis, Modality::Ir}) {
    const auto groups = dataset.by_identity(m);
    std::vector<int> ids;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (!groups[i].empty()) ids.push_back(static_cast<int>(i));
    if (static_cast<int>(ids.size()) < p)
      throw ConfigError(std::string("modality ") + to_string(m) + " has fewer than P=" + std::to_string(p) +
                        " identities");
    std::shuffle(ids.begin(), ids.end(), rng);
    auto& idx = m == Modality::Vis ? b.indices_vis : b.indices_ir;
    auto& lab = m == Modality::Vis ? b.labels_vis : b.labels_ir;
    for (int a = 0; a < p; ++a) {
      const int id = ids[static_cast<std::size_t>(a)];
      std::vector<std::size_t> pool = groups[static_cast<std::size_t>(id)];
      if (static_cast<int>(pool.size()) >= k) {
        std::shuffle(pool.begin(), pool.end(), rng);
        for (int s = 0; s < k; ++s) idx.push_back(pool[static_cast<std::size_t>(s)]);
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (int s = 0; s < k; ++s) idx.push_back(pool[pick(rng)]);
      }
      for (int s = 0; s < k; ++s) lab.push_back(id);
    }
  }
  const auto dim = dataset.input_dim();
  b.x_vis.resize(dim, static_cast<Eigen::Index>(b.indices_vis.size()));
  b.x_ir.resize(dim, static_cast<Eigen::Index>(b.indices_ir.size()));
  for (std::size_t i = 0; i < b.indices_vis.size(); ++i)
    b.x_vis.col(static_cast<Eigen::Index>(i)) = dataset.samples[b.indices_vis[i]].features;
  for (std::size_t i = 0; i < b.indices_ir.size(); ++i)
    b.x_ir.col(static_cast<Eigen::Index>(i)) = dataset.samples[b.indices_ir[i]].features;
  return b;
}

/// Per-parameter optimizer with separate learning rates for encoder and classifier parameters.
/// Sgd applies exactly p -= lr * g.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, const ModelState& shape)
      : kind_(kind), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

  void step(ModelState& params, const ModelState& grad, const LearningRates& lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    visit_params(
        [&](const std::string& name, bool is_cls, auto& p, const auto& g, auto& m, auto& v) {
          const double rate = is_cls ? lr.classifiers : name.rfind("front_", 0) == 0 ? lr.front : lr.encoder;
          if (kind_ == OptimizerKind::Sgd) {
            p -= rate * g;
            return;
          }
          m = kBeta1 * m + (1.0 - kBeta1) * g;
          v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
          p.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
        },
        params, grad, m_, v_);
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  OptimizerKind kind_;
  ModelState m_;
  ModelState v_;
  long t_ = 0;
};

struct CreStats {
  int consistent = 0;
  int single = 0;
  int contradictory = 0;
  std::optional<double> recovery;
};

struct EpochRecord {
  int phase = 1;
  int epoch = 0;
  LossTerms losses;  // epoch means
  double total = 0.0;
  LearningRates lr;
  std::optional<CreStats> cre;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"phase", r.phase},
                      {"epoch", r.epoch},
                      {"total", r.total},
                      {"losses",
                       {{"ce_expert", r.losses.ce_expert},
                        {"wrt_intra", r.losses.wrt_intra},
                        {"wrt_cross", r.losses.wrt_cross},
                        {"strong_ce", r.losses.strong_ce},
                        {"weak", r.losses.weak},
                        {"homo", r.losses.homo}}},
                      {"lr_encoder", r.lr.encoder},
                      {"lr_classifiers", r.lr.classifiers},
                      {"lr_front", r.lr.front}};
  if (r.cre) {
    j["cre"] = {{"m_c", r.cre->consistent}, {"m_s", r.cre->single}, {"m_w", r.cre->contradictory}};
    j["cre"]["pseudo_map_accuracy"] = r.cre->recovery ? nlohmann::json(*r.cre->recovery) : nlohmann::json();
  }
  return j;
}

struct TrainHooks {
  /// Called after every correspondence refresh with the phase-2 epoch index.
  std::function<void(const CorrespondenceSet&, int)> on_refresh;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ModelState model;
  std::optional<PrototypeBank> prototypes;
  std::vector<EpochRecord> history;
  std::optional<CorrespondenceSet> last_correspondences;
};

namespace detail {

inline int steps_for(const Dataset& d, const TrainConfig& c) {
  if (c.steps_per_epoch > 0) return c.steps_per_epoch;
  std::size_t nv = 0;
  for (const auto& s : d.samples) nv += s.modality == Modality::Vis ? 1 : 0;
  const std::size_t n = std::max(nv, d.samples.size() - nv);
  const auto per = static_cast<std::size_t>(c.batch_p * c.batch_k);
  return static_cast<int>(std::max<std::size_t>(1, (n + per - 1) / per));
}

inline void accumulate(LossTerms& acc, const LossTerms& t, double w) {
  acc.ce_expert += w * t.ce_expert;
  acc.wrt_intra += w * t.wrt_intra;
  acc.wrt_cross += w * t.wrt_cross;
  acc.strong_ce += w * t.strong_ce;
  acc.weak += w * t.weak;
  acc.homo += w * t.homo;
}

inline LossEvaluation checked_step(const ModelState& model, const MiniBatch& batch, const BatchView& view,
                                   const LossSpec& spec, int phase, int epoch, int step) {
  try {
    return evaluate_objective(model, batch.x_vis, batch.x_ir, view, spec, true);
  } catch (const NumericError& e) {
    throw NumericError("phase " + std::to_string(phase) + " epoch " + std::to_string(epoch) + " step " +
                       std::to_string(step) + ": " + e.what());
  }
}

}  // namespace detail

/// Expert construction: expert CE + lambda1 * intra-modal WRT, each modality on its own labels.
inline TrainResult train_phase1(ModelState model, const Dataset& dataset, const TrainConfig& config,
                                const TrainHooks& hooks = {}) {
  config.validate();
  TrainResult out;
  std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ull + 1);
  Optimizer opt(config.optimizer, model);
  const LossSpec spec = LossSpec::phase1(config.lambda1);
  const int steps = detail::steps_for(dataset, config);
  for (int epoch = 0; epoch < config.phase1_epochs; ++epoch) {
    EpochRecord rec;
    rec.phase = 1;
    rec.epoch = epoch;
    rec.lr = lr_at(epoch, config);
    for (int s = 0; s < steps; ++s) {
      const MiniBatch batch = sample_batch(dataset, config.batch_p, config.batch_k, rng);
      BatchView view;
      view.labels_vis = batch.labels_vis;
      view.labels_ir = batch.labels_ir;
      const auto ev = detail::checked_step(model, batch, view, spec, 1, epoch, s);
      opt.step(model, ev.grad, rec.lr);
      detail::accumulate(rec.losses, ev.terms, 1.0 / steps);
      rec.total += ev.total / steps;
    }
    if (!all_finite(model)) throw NumericError("phase 1 epoch " + std::to_string(epoch) + ": non-finite parameters");
    if (hooks.on_epoch) hooks.on_epoch(rec);
    out.history.push_back(rec);
  }
  out.model = std::move(model);
  return out;
}

/// Annotates a batch with the per-identity correspondence targets.
inline BatchView annotate(const MiniBatch& batch, const CorrespondenceTargets& t, const PrototypeBank* bank) {
  BatchView view;
  view.labels_vis = batch.labels_vis;
  view.labels_ir = batch.labels_ir;
  view.prototypes = bank;
  for (int v : batch.labels_vis) {
    view.pseudo_vis.push_back(t.pseudo[static_cast<std::size_t>(v)]);
    view.conflicts_vis.push_back(t.conflicts[static_cast<std::size_t>(v)]);
    view.matched_vis.push_back(t.matched[static_cast<std::size_t>(v)]);
  }
  for (int r : batch.labels_ir) view.matched_ir.push_back(t.matched_inv[static_cast<std::size_t>(r)]);
  return view;
}

/// Collaborative phase: correspondences are rebuilt every cre_refresh_every epochs; each step
/// optimizes expert CE + shared CE + consistency + lambda1 * cross WRT + lambda2 * relaxed CE
/// (consistency only for the full variant) and then moves the prototypes toward the batch means.
inline TrainResult train_phase2(ModelState model, const Dataset& dataset, const TrainConfig& config,
                                Variant variant = Variant::Full, const TrainHooks& hooks = {}) {
  config.validate();
  TrainResult out;
  std::mt19937_64 rng(config.seed * 0x9E3779B97F4A7C15ull + 2);
  Optimizer opt(config.optimizer, model);
  LossSpec spec = LossSpec::phase2(config.lambda1, config.lambda2);
  if (!uses_consistency(variant)) spec.homo = 0.0;
  const CorrespondenceMode mode = correspondence_mode(variant);
  PrototypeBank bank = init_bank(model, dataset, config.prototype_momentum);
  const int steps = detail::steps_for(dataset, config);
  CorrespondenceTargets targets;
  for (int epoch = 0; epoch < config.phase2_epochs; ++epoch) {
    EpochRecord rec;
    rec.phase = 2;
    rec.epoch = epoch;
    rec.lr = lr_at(epoch, config);
    if (epoch % config.cre_refresh_every == 0) {
      CorrespondenceSet corr = build_correspondences(model, dataset, config.min_count);
      targets = targets_for(corr, mode);
      CreStats st{corr.num_consistent(), corr.num_single(), corr.num_contradictory(), std::nullopt};
      if (dataset.ground_truth_alignment) st.recovery = recovery_rate(targets.pseudo, *dataset.ground_truth_alignment);
      rec.cre = st;
      if (hooks.on_refresh) hooks.on_refresh(corr, epoch);
      out.last_correspondences = std::move(corr);
    }
    for (int s = 0; s < steps; ++s) {
      const MiniBatch batch = sample_batch(dataset, config.batch_p, config.batch_k, rng);
      const BatchView view = annotate(batch, targets, &bank);
      const auto ev = detail::checked_step(model, batch, view, spec, 2, epoch, s);
      opt.step(model, ev.grad, rec.lr);
      update_from_batch(bank, Modality::Vis, ev.emb_vis, batch.labels_vis);
      update_from_batch(bank, Modality::Ir, ev.emb_ir, batch.labels_ir);
      detail::accumulate(rec.losses, ev.terms, 1.0 / steps);
      rec.total += ev.total / steps;
    }
    if (!all_finite(model)) throw NumericError("phase 2 epoch " + std::to_string(epoch) + ": non-finite parameters");
    if (hooks.on_epoch) hooks.on_epoch(rec);
    out.history.push_back(rec);
  }
  out.model = std::move(model);
  out.prototypes = std::move(bank);
  return out;
}

/// Whole pipeline for one variant. A phase-1 model may be supplied to share it across variants.
inline TrainResult train(const Dataset& dataset, const TrainConfig& config, Variant variant,
                         const TrainHooks& hooks = {}, const TrainResult* phase1 = nullptr) {
  config.validate();
  TrainResult p1;
  if (phase1) {
    p1 = *phase1;
  } else {
    ModelConfig mc = config.model;
    mc.dims.front() = static_cast<int>(dataset.input_dim());  // input width always follows the data
    p1 = train_phase1(init_model(mc, dataset.num_ids_vis, dataset.num_ids_ir, config.seed), dataset, config, hooks);
  }
  if (!runs_phase2(variant)) return p1;
  TrainResult p2 = train_phase2(p1.model, dataset, config, variant, hooks);
  p2.history.insert(p2.history.begin(), p1.history.begin(), p1.history.end());
  return p2;
}

}  // namespace xmatch
