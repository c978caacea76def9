#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "xmatch/errors.hpp"
#include "xmatch/losses.hpp"
#include "xmatch/model.hpp"

namespace xmatch {

/// Weighted sum of the training objectives. A zero weight skips the term entirely.
struct LossSpec {
  double ce_expert = 0.0;
  double wrt_intra = 0.0;
  double wrt_cross = 0.0;
  double strong_ce = 0.0;
  double weak = 0.0;
  double homo = 0.0;

  /// Expert construction objective: expert CE + lambda1 * intra-modal WRT.
  static LossSpec phase1(double lambda1) { return {1.0, lambda1, 0.0, 0.0, 0.0, 0.0}; }
  /// Collaborative objective: expert CE + shared CE + consistency + lambda1 * cross WRT + lambda2 * relaxed CE.
  static LossSpec phase2(double lambda1, double lambda2) { return {1.0, 0.0, lambda1, 1.0, lambda2, 1.0}; }
};

struct LossTerms {
  double ce_expert = 0.0;
  double wrt_intra = 0.0;
  double wrt_cross = 0.0;
  double strong_ce = 0.0;
  double weak = 0.0;
  double homo = 0.0;
};

struct LossEvaluation {
  double total = 0.0;
  LossTerms terms;
  /// Gradient of `total` with respect to every model parameter (empty when not requested).
  ModelState grad;
  WrtStats wrt;
  Eigen::MatrixXd emb_vis;
  Eigen::MatrixXd emb_ir;
};

/// Encodes both halves of a batch, evaluates the weighted loss and, when requested, its exact
/// gradient by backpropagation. `view` supplies labels, correspondences and prototypes; its
/// embedding blocks are overwritten.
inline LossEvaluation evaluate_objective(const ModelState& model, const Eigen::MatrixXd& x_vis,
                                         const Eigen::MatrixXd& x_ir, BatchView view, const LossSpec& spec,
                                         bool with_grad = true) {
  EncoderTrace tv;
  EncoderTrace tr;
  view.emb_vis = encode_batch(model, x_vis, Modality::Vis, with_grad ? &tv : nullptr);
  view.emb_ir = encode_batch(model, x_ir, Modality::Ir, with_grad ? &tr : nullptr);

  LossEvaluation out;
  LossGrad g;
  if (with_grad) g = LossGrad::zeros(view, model);
  LossGrad* gp = with_grad ? &g : nullptr;

  auto add = [&](const char* name, double w, double& slot, auto&& fn) {
    if (w == 0.0) return;
    slot = fn(w);
    if (!std::isfinite(slot)) throw NumericError(std::string("non-finite ") + name + " loss");
    out.total += w * slot;
  };
  add("ce_expert", spec.ce_expert, out.terms.ce_expert,
      [&](double w) { return ce_expert_loss(view, model, gp, w); });
  add("wrt_intra", spec.wrt_intra, out.terms.wrt_intra,
      [&](double w) { return wrt_loss(view, WrtRule::IntraModal, gp, w, &out.wrt); });
  add("wrt_cross", spec.wrt_cross, out.terms.wrt_cross,
      [&](double w) { return wrt_loss(view, WrtRule::CrossModal, gp, w, &out.wrt); });
  add("strong_ce", spec.strong_ce, out.terms.strong_ce,
      [&](double w) { return strong_ce_loss(view, model, gp, w); });
  add("weak", spec.weak, out.terms.weak, [&](double w) { return weak_loss(view, model, gp, w); });
  add("homo", spec.homo, out.terms.homo, [&](double w) { return homo_loss(view, model, gp, w); });

  out.emb_vis = view.emb_vis;
  out.emb_ir = view.emb_ir;
  if (!with_grad) return out;
  out.grad = zeros_like(model);
  out.grad.expert_vis = g.expert_vis;
  out.grad.expert_ir = g.expert_ir;
  out.grad.shared_cls = g.shared_cls;
  if (view.emb_vis.cols() > 0) backprop_encoder(model, Modality::Vis, tv, g.emb_vis, out.grad);
  if (view.emb_ir.cols() > 0) backprop_encoder(model, Modality::Ir, tr, g.emb_ir, out.grad);
  if (!all_finite(out.grad)) throw NumericError("non-finite gradient");
  return out;
}

}  // namespace xmatch
