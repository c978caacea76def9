#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "xmatch/data.hpp"
#include "xmatch/errors.hpp"

namespace xmatch {

using Embedding = Eigen::VectorXd;
using PredictionVector = Eigen::VectorXd;

/// y = act(W x + b); W is out x in.
struct AffineLayer {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
  friend bool operator==(const AffineLayer&, const AffineLayer&) = default;
};

/// Linear-softmax classifier; weight is d x C, scores are W^T f + b.
struct Classifier {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;

  Eigen::Index input_dim() const { return weight.rows(); }
  Eigen::Index num_classes() const { return weight.cols(); }
  friend bool operator==(const Classifier&, const Classifier&) = default;
};

/// Two modality-specific front stacks feeding one shared trunk, plus the two modality experts and
/// the shared classifier over infrared identities. Also used as the container for gradients and
/// optimizer moments, since those share its shapes.
struct ModelState {
  std::vector<AffineLayer> front_vis;
  std::vector<AffineLayer> front_ir;
  std::vector<AffineLayer> trunk;
  Classifier expert_vis;
  Classifier expert_ir;
  Classifier shared_cls;

  const std::vector<AffineLayer>& front(Modality m) const { return m == Modality::Vis ? front_vis : front_ir; }
  std::vector<AffineLayer>& front(Modality m) { return m == Modality::Vis ? front_vis : front_ir; }
  const Classifier& expert(Modality m) const { return m == Modality::Vis ? expert_vis : expert_ir; }
  Classifier& expert(Modality m) { return m == Modality::Vis ? expert_vis : expert_ir; }

  Eigen::Index input_dim() const { return front_vis.empty() ? trunk.front().in_dim() : front_vis.front().in_dim(); }
  Eigen::Index embedding_dim() const { return trunk.back().out_dim(); }

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

struct ModelConfig {
  /// Layer widths from input to embedding: {D_in, h1, ..., d}.
  std::vector<int> dims{16, 32, 32, 32, 16};
  /// How many of the leading layers are modality-specific.
  int front_layers = 2;
  /// Start both fronts from the same draw (they still train independently).
  bool shared_front_init = true;

  void validate() const {
    if (dims.size() < 2) throw ConfigError("dims needs at least an input and an embedding size");
    for (int d : dims)
      if (d <= 0) throw ConfigError("layer sizes must be positive");
    if (dims.back() < 2) throw ConfigError("embedding dimension must be >= 2");
    const int layers = static_cast<int>(dims.size()) - 1;
    if (front_layers < 0 || front_layers >= layers)
      throw ConfigError("front_layers must leave at least one shared trunk layer");
  }
};

/// Visits every parameter tensor of one or more same-shaped models in a fixed order.
/// fn receives (name, is_classifier, tensors...) where tensors are MatrixXd& or VectorXd&.
template <typename Fn, typename... Models>
void visit_params(Fn&& fn, Models&... models) {
  auto layers = [&](const char* prefix, auto get) {
    const std::size_t n = get(std::get<0>(std::tie(models...))).size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::string base = std::string(prefix) + "." + std::to_string(i);
      fn(base + ".weight", false, get(models)[i].weight...);
      fn(base + ".bias", false, get(models)[i].bias...);
    }
  };
  layers("front_vis", [](auto& m) -> auto& { return m.front_vis; });
  layers("front_ir", [](auto& m) -> auto& { return m.front_ir; });
  layers("trunk", [](auto& m) -> auto& { return m.trunk; });
  fn(std::string("expert_vis.weight"), true, models.expert_vis.weight...);
  fn(std::string("expert_vis.bias"), true, models.expert_vis.bias...);
  fn(std::string("expert_ir.weight"), true, models.expert_ir.weight...);
  fn(std::string("expert_ir.bias"), true, models.expert_ir.bias...);
  fn(std::string("shared_cls.weight"), true, models.shared_cls.weight...);
  fn(std::string("shared_cls.bias"), true, models.shared_cls.bias...);
}

inline ModelState zeros_like(const ModelState& m) {
  ModelState z = m;
  visit_params([](const std::string&, bool, auto& t) { t.setZero(); }, z);
  return z;
}

inline std::size_t parameter_count(const ModelState& m) {
  std::size_t n = 0;
  visit_params([&](const std::string&, bool, const auto& t) { n += static_cast<std::size_t>(t.size()); }, m);
  return n;
}

inline bool all_finite(const ModelState& m) {
  bool ok = true;
  visit_params([&](const std::string&, bool, const auto& t) { ok = ok && t.allFinite(); }, m);
  return ok;
}

namespace detail {

inline AffineLayer glorot_layer(int in, int out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / (in + out));
  std::uniform_real_distribution<double> u(-a, a);
  AffineLayer l{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
  for (Eigen::Index c = 0; c < in; ++c)
    for (Eigen::Index r = 0; r < out; ++r) l.weight(r, c) = u(rng);
  return l;
}

inline Classifier glorot_classifier(int d, int classes, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / (d + classes));
  std::uniform_real_distribution<double> u(-a, a);
  Classifier c{Eigen::MatrixXd(d, classes), Eigen::VectorXd::Zero(classes)};
  for (Eigen::Index j = 0; j < classes; ++j)
    for (Eigen::Index i = 0; i < d; ++i) c.weight(i, j) = u(rng);
  return c;
}

}  // namespace detail

/// Glorot-uniform weights, zero biases. Deterministic in seed.
inline ModelState init_model(const ModelConfig& config, int num_ids_vis, int num_ids_ir, std::uint64_t seed) {
  config.validate();
  if (num_ids_vis < 1 || num_ids_ir < 1) throw ConfigError("identity counts must be positive");
  std::mt19937_64 rng(seed);
  ModelState m;
  const int layers = static_cast<int>(config.dims.size()) - 1;
  const auto dim = [&](int i) { return config.dims[static_cast<std::size_t>(i)]; };
  for (int i = 0; i < config.front_layers; ++i) m.front_vis.push_back(detail::glorot_layer(dim(i), dim(i + 1), rng));
  if (config.shared_front_init) {
    m.front_ir = m.front_vis;
  } else {
    for (int i = 0; i < config.front_layers; ++i) m.front_ir.push_back(detail::glorot_layer(dim(i), dim(i + 1), rng));
  }
  for (int i = config.front_layers; i < layers; ++i) m.trunk.push_back(detail::glorot_layer(dim(i), dim(i + 1), rng));
  const int d = config.dims.back();
  m.expert_vis = detail::glorot_classifier(d, num_ids_vis, rng);
  m.expert_ir = detail::glorot_classifier(d, num_ids_ir, rng);
  m.shared_cls = detail::glorot_classifier(d, num_ids_ir, rng);
  return m;
}

/// Per-layer activations kept for backprop. inputs[l] feeds layer l; outputs[l] is its
/// post-activation result. Columns are samples.
struct EncoderTrace {
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<Eigen::MatrixXd> outputs;
};

/// Encodes a D_in x n block of samples (one per column) into a d x n block of embeddings.
/// Every layer applies tanh except the last trunk layer, which is linear.
inline Eigen::MatrixXd encode_batch(const ModelState& model, const Eigen::MatrixXd& x, Modality modality,
                                    EncoderTrace* trace = nullptr) {
  if (x.rows() != model.input_dim())
    throw DimensionError("input has dimension " + std::to_string(x.rows()) + ", model expects " +
                         std::to_string(model.input_dim()));
  const auto& front = model.front(modality);
  const std::size_t total = front.size() + model.trunk.size();
  if (trace) {
    trace->inputs.clear();
    trace->outputs.clear();
  }
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < total; ++l) {
    const AffineLayer& layer = l < front.size() ? front[l] : model.trunk[l - front.size()];
    Eigen::MatrixXd z = layer.weight * h;
    z.colwise() += layer.bias;
    if (l + 1 < total) z = z.array().tanh().matrix();
    if (trace) trace->inputs.push_back(std::move(h));
    h = std::move(z);
    if (trace) trace->outputs.push_back(h);
  }
  return h;
}

inline Embedding encode(const ModelState& model, const Eigen::VectorXd& x, Modality modality) {
  return encode_batch(model, x, modality).col(0);
}

/// Backpropagates dL/d(embeddings) through the trunk and the modality's front, accumulating
/// into grad (which has the shapes of model).
inline void backprop_encoder(const ModelState& model, Modality modality, const EncoderTrace& trace,
                             const Eigen::MatrixXd& d_emb, ModelState& grad) {
  const auto& front = model.front(modality);
  auto& gfront = grad.front(modality);
  const std::size_t total = front.size() + model.trunk.size();
  Eigen::MatrixXd delta = d_emb;  // dL/d(layer output)
  for (std::size_t l = total; l-- > 0;) {
    const bool is_front = l < front.size();
    const AffineLayer& layer = is_front ? front[l] : model.trunk[l - front.size()];
    AffineLayer& g = is_front ? gfront[l] : grad.trunk[l - front.size()];
    if (l + 1 < total) delta.array() *= 1.0 - trace.outputs[l].array().square();  // tanh'
    g.weight.noalias() += delta * trace.inputs[l].transpose();
    g.bias += delta.rowwise().sum();
    if (l > 0) delta = layer.weight.transpose() * delta;
  }
}

/// Column-wise softmax with max subtraction.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double mx = logits.col(c).maxCoeff();
    p.col(c) = (logits.col(c).array() - mx).exp().matrix();
    p.col(c) /= p.col(c).sum();
  }
  return p;
}

inline Eigen::MatrixXd classifier_logits(const Classifier& w, const Eigen::MatrixXd& f) {
  if (f.rows() != w.input_dim())
    throw DimensionError("embedding has dimension " + std::to_string(f.rows()) + ", classifier expects " +
                         std::to_string(w.input_dim()));
  Eigen::MatrixXd z = w.weight.transpose() * f;
  z.colwise() += w.bias;
  return z;
}

/// Softmax predictions for a d x n block of embeddings; result is C x n.
inline Eigen::MatrixXd classify_batch(const Classifier& w, const Eigen::MatrixXd& f) {
  return softmax_columns(classifier_logits(w, f));
}

inline PredictionVector classify(const Classifier& w, const Embedding& f) { return classify_batch(w, f).col(0); }

/// Accumulates classifier gradients for logits gradient dz (C x n) at inputs f (d x n) and returns
/// dL/df.
inline Eigen::MatrixXd backprop_classifier(const Classifier& w, const Eigen::MatrixXd& f, const Eigen::MatrixXd& dz,
                                           Classifier& grad) {
  grad.weight.noalias() += f * dz.transpose();
  grad.bias += dz.rowwise().sum();
  return w.weight * dz;
}

/// Gradient of a loss through softmax: given dL/dp per column, returns dL/dz.
inline Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd& p, const Eigen::MatrixXd& dp) {
  Eigen::MatrixXd dz(p.rows(), p.cols());
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    const double dot = p.col(c).dot(dp.col(c));
    dz.col(c) = p.col(c).cwiseProduct((dp.col(c).array() - dot).matrix());
  }
  return dz;
}

}  // namespace xmatch
