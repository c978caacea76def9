#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "xmatch/data.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/model.hpp"
#include "xmatch/prototypes.hpp"

namespace xmatch {

inline constexpr double kProbClampLo = 1e-12;
inline constexpr double kProbClampHi = 1.0 - 1e-12;
/// Guard inside log(1 - p + eps) of the relaxed loss.
inline constexpr double kWeakEpsilon = 1e-10;

/// Embeddings of one mini-batch plus every label and correspondence annotation the losses read.
/// Embedding blocks are d x n with one sample per column. Per-sample annotation vectors are either
/// empty (no correspondences) or sized like the matching label vector.
struct BatchView {
  Eigen::MatrixXd emb_vis;
  std::vector<int> labels_vis;
  Eigen::MatrixXd emb_ir;
  std::vector<int> labels_ir;

  /// Infrared identity assigned to each visible sample through M_c or M_s, or kNoMatch.
  std::vector<int> pseudo_vis;
  /// Conflict candidates K for each visible sample (empty when its identity has no M_w entry).
  std::vector<std::vector<int>> conflicts_vis;
  /// M_c partner of each visible sample (an infrared identity) and of each infrared sample (a
  /// visible identity), or kNoMatch. Drives the cross-modal triplet positives and the
  /// expert-consistency loss.
  std::vector<int> matched_vis;
  std::vector<int> matched_ir;

  const PrototypeBank* prototypes = nullptr;

  int n_vis() const { return static_cast<int>(labels_vis.size()); }
  int n_ir() const { return static_cast<int>(labels_ir.size()); }

  int n_pseudo() const {
    return static_cast<int>(std::count_if(pseudo_vis.begin(), pseudo_vis.end(), [](int v) { return v != kNoMatch; }));
  }
  int n_matched_vis() const {
    return static_cast<int>(std::count_if(matched_vis.begin(), matched_vis.end(), [](int v) { return v != kNoMatch; }));
  }
  int n_weak() const {
    return static_cast<int>(
        std::count_if(conflicts_vis.begin(), conflicts_vis.end(), [](const auto& k) { return !k.empty(); }));
  }

  int pseudo_of(std::size_t i) const { return pseudo_vis.empty() ? kNoMatch : pseudo_vis[i]; }
  int matched_vis_of(std::size_t i) const { return matched_vis.empty() ? kNoMatch : matched_vis[i]; }
  int matched_ir_of(std::size_t i) const { return matched_ir.empty() ? kNoMatch : matched_ir[i]; }
};

/// Gradients of a scalar loss with respect to the batch embeddings and the three classifiers.
struct LossGrad {
  Eigen::MatrixXd emb_vis;
  Eigen::MatrixXd emb_ir;
  Classifier expert_vis;
  Classifier expert_ir;
  Classifier shared_cls;

  static LossGrad zeros(const BatchView& b, const ModelState& m) {
    auto zc = [](const Classifier& c) {
      return Classifier{Eigen::MatrixXd::Zero(c.weight.rows(), c.weight.cols()), Eigen::VectorXd::Zero(c.bias.size())};
    };
    return {Eigen::MatrixXd::Zero(b.emb_vis.rows(), b.emb_vis.cols()),
            Eigen::MatrixXd::Zero(b.emb_ir.rows(), b.emb_ir.cols()), zc(m.expert_vis), zc(m.expert_ir),
            zc(m.shared_cls)};
  }
};

namespace detail {

inline void check_labels(const std::vector<int>& labels, Eigen::Index classes, const char* what) {
  for (int y : labels)
    if (y != kNoMatch && (y < 0 || y >= classes))
      throw DimensionError(std::string(what) + ": label " + std::to_string(y) + " outside [0, " +
                           std::to_string(classes) + ")");
}

/// Mean of -log clamp(p[target]) over columns whose target is not kNoMatch. Accumulates
/// weight * gradient into gw (classifier) and gf (embeddings) when given.
inline double ce_term(const Classifier& w, const Eigen::MatrixXd& f, const std::vector<int>& targets, Classifier* gw,
                      Eigen::MatrixXd* gf, double weight) {
  const auto n = std::count_if(targets.begin(), targets.end(), [](int t) { return t != kNoMatch; });
  if (n == 0) return 0.0;
  check_labels(targets, w.num_classes(), "cross-entropy");
  const Eigen::MatrixXd p = classify_batch(w, f);
  double loss = 0.0;
  Eigen::MatrixXd dz = Eigen::MatrixXd::Zero(p.rows(), p.cols());
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const int y = targets[i];
    if (y == kNoMatch) continue;
    const auto c = static_cast<Eigen::Index>(i);
    const double py = p(y, c);
    loss -= std::log(std::clamp(py, kProbClampLo, kProbClampHi));
    if (py > kProbClampLo && py < kProbClampHi) {
      dz.col(c) = p.col(c) * inv;
      dz(y, c) -= inv;
    }
  }
  if (gw) *gf += backprop_classifier(w, f, dz * weight, *gw);
  return loss * inv;
}

inline double softplus(double s) { return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }
inline double sigmoid(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

inline double entropy(const Eigen::VectorXd& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0) h -= p(i) * std::log(p(i));
  return h;
}

}  // namespace detail

/// Expert identity loss: for each modality, mean -log p of the true intra-modal identity under
/// that modality's expert; the two means are summed.
inline double ce_expert_loss(const BatchView& b, const ModelState& m, LossGrad* grad = nullptr, double weight = 1.0) {
  return detail::ce_term(m.expert_vis, b.emb_vis, b.labels_vis, grad ? &grad->expert_vis : nullptr,
                         grad ? &grad->emb_vis : nullptr, weight) +
         detail::ce_term(m.expert_ir, b.emb_ir, b.labels_ir, grad ? &grad->expert_ir : nullptr,
                         grad ? &grad->emb_ir : nullptr, weight);
}

/// Shared-classifier identity loss: visible samples against their pseudo infrared identities,
/// infrared samples against their own labels.
inline double strong_ce_loss(const BatchView& b, const ModelState& m, LossGrad* grad = nullptr, double weight = 1.0) {
  std::vector<int> targets(b.labels_vis.size(), kNoMatch);
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = b.pseudo_of(i);
  return detail::ce_term(m.shared_cls, b.emb_vis, targets, grad ? &grad->shared_cls : nullptr,
                         grad ? &grad->emb_vis : nullptr, weight) +
         detail::ce_term(m.shared_cls, b.emb_ir, b.labels_ir, grad ? &grad->shared_cls : nullptr,
                         grad ? &grad->emb_ir : nullptr, weight);
}

/// Mask of the relaxed loss: classes whose probability is strictly below every candidate in K.
inline Eigen::VectorXd weak_mask(const Eigen::VectorXd& p, const std::vector<int>& conflicts) {
  double floor = std::numeric_limits<double>::infinity();
  for (int k : conflicts) floor = std::min(floor, p(k));
  Eigen::VectorXd mask = Eigen::VectorXd::Zero(p.size());
  for (Eigen::Index l = 0; l < p.size(); ++l)
    if (p(l) < floor) mask(l) = 1.0;
  return mask;
}

/// Relaxed loss of one prediction: -sum over masked classes of log(1 - p_l + eps).
inline double weak_term(const Eigen::VectorXd& p, const std::vector<int>& conflicts) {
  const Eigen::VectorXd mask = weak_mask(p, conflicts);
  double loss = 0.0;
  for (Eigen::Index l = 0; l < p.size(); ++l)
    if (mask(l) != 0.0) loss -= std::log(1.0 - p(l) + kWeakEpsilon);
  return loss;
}

/// Relaxed identity loss for visible samples with conflicting candidates K: pushes down every
/// shared-classifier class ranked below all of K, leaving K itself unconstrained.
inline double weak_loss(const BatchView& b, const ModelState& m, LossGrad* grad = nullptr, double weight = 1.0) {
  const int nw = b.n_weak();
  if (nw == 0) return 0.0;
  const Eigen::MatrixXd p = classify_batch(m.shared_cls, b.emb_vis);
  Eigen::MatrixXd dp = Eigen::MatrixXd::Zero(p.rows(), p.cols());
  double loss = 0.0;
  const double inv = 1.0 / nw;
  for (std::size_t i = 0; i < b.conflicts_vis.size(); ++i) {
    const auto& k = b.conflicts_vis[i];
    if (k.empty()) continue;
    detail::check_labels(k, p.rows(), "weak_loss conflict set");
    const auto c = static_cast<Eigen::Index>(i);
    loss += weak_term(p.col(c), k);
    const Eigen::VectorXd mask = weak_mask(p.col(c), k);
    for (Eigen::Index l = 0; l < p.rows(); ++l)
      if (mask(l) != 0.0) dp(l, c) = inv / (1.0 - p(l, c) + kWeakEpsilon);
  }
  if (grad) {
    const Eigen::MatrixXd dz = softmax_backward(p, dp) * weight;
    grad->emb_vis += backprop_classifier(m.shared_cls, b.emb_vis, dz, grad->shared_cls);
  }
  return loss * inv;
}

/// Batch-mean Shannon entropy (natural log) of prediction columns; 0 for an empty set.
inline double mean_entropy(const Eigen::MatrixXd& preds) {
  if (preds.cols() == 0) return 0.0;
  double h = 0.0;
  for (Eigen::Index c = 0; c < preds.cols(); ++c) h += detail::entropy(preds.col(c));
  return h / static_cast<double>(preds.cols());
}

struct EntropyWeights {
  double w_vis = 0.5;
  double w_ir = 0.5;
};

/// Weights of the two expert-consistency terms from the mean entropies of the expert-on-prototype
/// predictions. An empty set hands full weight to the other side; two zero entropies split evenly.
inline EntropyWeights entropy_weights(const Eigen::MatrixXd& preds_r_to_v, const Eigen::MatrixXd& preds_v_to_r) {
  const bool has_v = preds_r_to_v.cols() > 0;
  const bool has_r = preds_v_to_r.cols() > 0;
  if (has_v && !has_r) return {1.0, 0.0};
  if (!has_v && has_r) return {0.0, 1.0};
  if (!has_v && !has_r) return {0.5, 0.5};
  const double hv = mean_entropy(preds_r_to_v);
  const double hr = mean_entropy(preds_v_to_r);
  const double s = hv + hr;
  if (!(s > 0)) return {0.5, 0.5};
  return {hv / s, 1.0 - hv / s};
}

/// One side of the expert-consistency loss: squared distance between sample predictions and
/// prototype predictions, averaged over samples and classes. Columns are samples.
inline double homo_side_loss(const Eigen::MatrixXd& p_self, const Eigen::MatrixXd& p_cross) {
  if (p_self.rows() != p_cross.rows() || p_self.cols() != p_cross.cols())
    throw DimensionError("homo_side_loss: prediction blocks differ in shape");
  if (p_self.cols() == 0) return 0.0;
  return (p_self - p_cross).squaredNorm() / (static_cast<double>(p_self.cols()) * static_cast<double>(p_self.rows()));
}

/// Components of the expert-consistency loss, exposed for tests and history.
struct HomoBreakdown {
  double loss_vis = 0.0;
  double loss_ir = 0.0;
  EntropyWeights weights;
  int n_vis = 0;
  int n_ir = 0;
  double total() const { return weights.w_vis * loss_vis + weights.w_ir * loss_ir; }
};

/// Expert-consistency loss. For a visible sample matched (M_c) to infrared identity b, the visible
/// expert's prediction on the sample is pulled toward its prediction on the infrared prototype of b;
/// symmetrically for infrared samples. Sides are mixed with entropy weights, and the gradient
/// includes the dependence of those weights on the prototype predictions. Prototypes are constants.
inline double homo_loss(const BatchView& b, const ModelState& m, LossGrad* grad = nullptr, double weight = 1.0,
                        HomoBreakdown* breakdown = nullptr) {
  HomoBreakdown out;
  if (!b.prototypes) {
    const bool any_ir = std::any_of(b.matched_ir.begin(), b.matched_ir.end(), [](int v) { return v != kNoMatch; });
    if (b.n_matched_vis() > 0 || any_ir) throw ConfigError("homo_loss needs a prototype bank");
    if (breakdown) *breakdown = out;
    return 0.0;
  }
  const PrototypeBank& bank = *b.prototypes;

  // One side: samples of modality `self` matched to identities of the other modality. Returns the
  // predictions needed for the loss and for the entropy term.
  struct Side {
    std::vector<Eigen::Index> cols;  // sample columns used
    Eigen::MatrixXd protos;          // prototype of the matched identity, per used sample
    Eigen::MatrixXd p_self;          // expert on sample
    Eigen::MatrixXd p_cross;         // expert on prototype
    double loss = 0.0;
  };
  auto build = [&](const Eigen::MatrixXd& emb, Modality self, auto matched_of, std::size_t n) {
    Side s;
    const Modality partner = other(self);
    for (std::size_t i = 0; i < n; ++i) {
      const int t = matched_of(i);
      if (t == kNoMatch || !bank.is_initialized(partner, t)) continue;
      s.cols.push_back(static_cast<Eigen::Index>(i));
    }
    const auto k = static_cast<Eigen::Index>(s.cols.size());
    if (k == 0) return s;
    Eigen::MatrixXd f(emb.rows(), k);
    s.protos.resize(emb.rows(), k);
    for (Eigen::Index j = 0; j < k; ++j) {
      f.col(j) = emb.col(s.cols[static_cast<std::size_t>(j)]);
      s.protos.col(j) = bank.protos(partner).col(matched_of(static_cast<std::size_t>(s.cols[static_cast<std::size_t>(j)])));
    }
    const Classifier& w = m.expert(self);
    s.p_self = classify_batch(w, f);
    s.p_cross = classify_batch(w, s.protos);
    s.loss = homo_side_loss(s.p_self, s.p_cross);
    return s;
  };
  Side sv = build(b.emb_vis, Modality::Vis, [&](std::size_t i) { return b.matched_vis_of(i); }, b.labels_vis.size());
  Side sr = build(b.emb_ir, Modality::Ir, [&](std::size_t i) { return b.matched_ir_of(i); }, b.labels_ir.size());

  out.n_vis = static_cast<int>(sv.cols.size());
  out.n_ir = static_cast<int>(sr.cols.size());
  out.loss_vis = sv.loss;
  out.loss_ir = sr.loss;
  out.weights = entropy_weights(sv.p_cross, sr.p_cross);
  if (breakdown) *breakdown = out;
  if (out.n_vis == 0 && out.n_ir == 0) return 0.0;
  const double total = out.total();

  if (grad) {
    // dL/dH for each side's entropy, nonzero only when both sides exist with positive entropy.
    double dh_v = 0.0;
    double dh_r = 0.0;
    if (out.n_vis > 0 && out.n_ir > 0) {
      const double hv = mean_entropy(sv.p_cross);
      const double hr = mean_entropy(sr.p_cross);
      const double s = hv + hr;
      if (s > 0) {
        dh_v = hr * (sv.loss - sr.loss) / (s * s);
        dh_r = hv * (sr.loss - sv.loss) / (s * s);
      }
    }
    auto backward = [&](const Side& s, Modality self, double w_side, double dh, Eigen::MatrixXd& gemb) {
      const auto k = static_cast<Eigen::Index>(s.cols.size());
      if (k == 0) return;
      const Classifier& w = m.expert(self);
      Classifier& gw = self == Modality::Vis ? grad->expert_vis : grad->expert_ir;
      const double scale = 2.0 * w_side / (static_cast<double>(k) * static_cast<double>(w.num_classes()));
      const Eigen::MatrixXd diff = s.p_self - s.p_cross;
      Eigen::MatrixXd dz_self = softmax_backward(s.p_self, diff * scale);
      Eigen::MatrixXd dz_cross = softmax_backward(s.p_cross, -diff * scale);
      if (dh != 0.0) {
        // d(mean entropy)/dz = -p (log p + H_col) / k
        for (Eigen::Index c = 0; c < k; ++c) {
          const double h = detail::entropy(s.p_cross.col(c));
          for (Eigen::Index l = 0; l < s.p_cross.rows(); ++l) {
            const double pl = s.p_cross(l, c);
            if (pl > 0) dz_cross(l, c) += dh * (-pl * (std::log(pl) + h) / static_cast<double>(k));
          }
        }
      }
      Eigen::MatrixXd f(gemb.rows(), k);
      // Sample-side gradient flows to the embeddings; prototype side only to the classifier.
      Classifier scratch{Eigen::MatrixXd::Zero(w.weight.rows(), w.weight.cols()), Eigen::VectorXd::Zero(w.bias.size())};
      const Eigen::MatrixXd& emb = self == Modality::Vis ? b.emb_vis : b.emb_ir;
      for (Eigen::Index j = 0; j < k; ++j) f.col(j) = emb.col(s.cols[static_cast<std::size_t>(j)]);
      const Eigen::MatrixXd df = backprop_classifier(w, f, dz_self * weight, gw);
      for (Eigen::Index j = 0; j < k; ++j) gemb.col(s.cols[static_cast<std::size_t>(j)]) += df.col(j);
      backprop_classifier(w, s.protos, dz_cross * weight, scratch);
      gw.weight += scratch.weight;
      gw.bias += scratch.bias;
    };
    backward(sv, Modality::Vis, out.weights.w_vis, dh_v, grad->emb_vis);
    backward(sr, Modality::Ir, out.weights.w_ir, dh_r, grad->emb_ir);
  }
  return total;
}

enum class WrtRule { IntraModal, CrossModal };

struct WrtStats {
  int anchors_used = 0;
  int anchors_skipped = 0;
};

namespace detail {

/// +1 positive, -1 negative, 0 not a candidate for anchor i.
inline int wrt_relation(const BatchView& b, WrtRule rule, std::size_t i, std::size_t j) {
  if (i == j) return 0;
  const std::size_t nv = b.labels_vis.size();
  const bool vi = i < nv;
  const bool vj = j < nv;
  const int li = vi ? b.labels_vis[i] : b.labels_ir[i - nv];
  const int lj = vj ? b.labels_vis[j] : b.labels_ir[j - nv];
  if (vi == vj) return li == lj ? 1 : -1;
  if (rule == WrtRule::IntraModal) return 0;
  const int partner = vi ? b.matched_vis_of(i) : b.matched_vis_of(j);
  const int ir_label = vi ? lj : li;
  return partner != kNoMatch && partner == ir_label ? 1 : -1;
}

}  // namespace detail

/// Weighted regularization triplet loss. For each anchor, positives are softmax-weighted by
/// distance and negatives by negative distance; the per-anchor loss is softplus of the weighted
/// positive distance minus the weighted negative distance. Anchors are averaged within each
/// modality and the two means are summed. Anchors lacking a positive or a negative are skipped.
///
/// IntraModal only compares samples of the same modality. CrossModal adds cross-modal pairs:
/// positive when M_c matches the two identities, negative otherwise.
inline double wrt_loss(const BatchView& b, WrtRule rule, LossGrad* grad = nullptr, double weight = 1.0,
                       WrtStats* stats = nullptr) {
  const auto nv = static_cast<Eigen::Index>(b.labels_vis.size());
  const auto nr = static_cast<Eigen::Index>(b.labels_ir.size());
  const Eigen::Index n = nv + nr;
  const Eigen::Index d = nv > 0 ? b.emb_vis.rows() : b.emb_ir.rows();
  Eigen::MatrixXd f(d, n);
  if (nv > 0) f.leftCols(nv) = b.emb_vis;
  if (nr > 0) f.rightCols(nr) = b.emb_ir;

  Eigen::MatrixXd dist(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) dist(i, j) = dist(j, i) = (f.col(i) - f.col(j)).norm();
  }

  // First pass: which anchors are usable, per modality.
  std::vector<char> usable(static_cast<std::size_t>(n), 0);
  int used[2] = {0, 0};
  WrtStats st;
  for (Eigen::Index i = 0; i < n; ++i) {
    bool has_p = false;
    bool has_n = false;
    for (Eigen::Index j = 0; j < n && !(has_p && has_n); ++j) {
      const int r = detail::wrt_relation(b, rule, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      has_p |= r > 0;
      has_n |= r < 0;
    }
    if (has_p && has_n) {
      usable[static_cast<std::size_t>(i)] = 1;
      ++used[i < nv ? 0 : 1];
      ++st.anchors_used;
    } else {
      ++st.anchors_skipped;
    }
  }
  if (stats) *stats = st;
  if (st.anchors_used == 0) throw NumericError("wrt_loss: no anchor has both a positive and a negative");

  Eigen::MatrixXd gf = grad ? Eigen::MatrixXd::Zero(d, n) : Eigen::MatrixXd();
  double total = 0.0;
  std::vector<double> wp;
  std::vector<double> wn;
  std::vector<Eigen::Index> pos;
  std::vector<Eigen::Index> neg;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!usable[static_cast<std::size_t>(i)]) continue;
    pos.clear();
    neg.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      const int r = detail::wrt_relation(b, rule, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      if (r > 0) pos.push_back(j);
      else if (r < 0) neg.push_back(j);
    }
    // Softmax weights over +d (positives) and -d (negatives), max-shifted.
    double mp = -std::numeric_limits<double>::infinity();
    for (auto j : pos) mp = std::max(mp, dist(i, j));
    double mn = -std::numeric_limits<double>::infinity();
    for (auto k : neg) mn = std::max(mn, -dist(i, k));
    wp.assign(pos.size(), 0.0);
    wn.assign(neg.size(), 0.0);
    double zp = 0.0;
    double zn = 0.0;
    for (std::size_t a = 0; a < pos.size(); ++a) zp += (wp[a] = std::exp(dist(i, pos[a]) - mp));
    for (std::size_t a = 0; a < neg.size(); ++a) zn += (wn[a] = std::exp(-dist(i, neg[a]) - mn));
    double sp = 0.0;
    double sn = 0.0;
    for (std::size_t a = 0; a < pos.size(); ++a) sp += (wp[a] /= zp) * dist(i, pos[a]);
    for (std::size_t a = 0; a < neg.size(); ++a) sn += (wn[a] /= zn) * dist(i, neg[a]);
    const double s = sp - sn;
    const double scale = 1.0 / used[i < nv ? 0 : 1];
    total += scale * detail::softplus(s);
    if (!grad) continue;
    const double g = weight * scale * detail::sigmoid(s);
    auto push = [&](Eigen::Index j, double coeff) {
      const double dij = dist(i, j);
      if (dij <= 1e-300) return;  // d(||x||)/dx undefined at 0; use the zero subgradient
      const Eigen::VectorXd u = (f.col(i) - f.col(j)) * (coeff / dij);
      gf.col(i) += u;
      gf.col(j) -= u;
    };
    for (std::size_t a = 0; a < pos.size(); ++a) push(pos[a], g * wp[a] * (1.0 + dist(i, pos[a]) - sp));
    for (std::size_t a = 0; a < neg.size(); ++a) push(neg[a], -g * wn[a] * (1.0 - dist(i, neg[a]) + sn));
  }
  if (grad) {
    if (nv > 0) grad->emb_vis += gf.leftCols(nv);
    if (nr > 0) grad->emb_ir += gf.rightCols(nr);
  }
  return total;
}

}  // namespace xmatch
