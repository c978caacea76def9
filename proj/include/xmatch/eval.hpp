#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "xmatch/cre.hpp"
#include "xmatch/data.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/model.hpp"
#include "xmatch/util.hpp"

namespace xmatch {

enum class EvalDirection { VisToIr, IrToVis };

inline const char* to_string(EvalDirection d) { return d == EvalDirection::VisToIr ? "vis2ir" : "ir2vis"; }

struct MetricsReport {
  /// cmc[r] = fraction of queries with a relevant item within the top r+1.
  std::vector<double> cmc;
  double map = 0.0;
  double minp = 0.0;
  EvalDirection direction = EvalDirection::VisToIr;
  std::optional<double> cre_recovery;
  int num_queries = 0;
  /// Queries with no relevant gallery item; left out of every average.
  int excluded_queries = 0;

  double rank1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

/// Scales each column to unit Euclidean norm; zero columns stay zero.
inline Eigen::MatrixXd normalize_columns(Eigen::MatrixXd m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    const double n = m.col(c).norm();
    if (n > 0) m.col(c) /= n;
  }
  return m;
}

/// Gallery indices by ascending distance between unit-normalized embeddings; ties keep index order.
inline std::vector<std::size_t> rank_gallery_normalized(const Eigen::VectorXd& query_unit,
                                                        const Eigen::MatrixXd& gallery_unit) {
  const auto n = static_cast<std::size_t>(gallery_unit.cols());
  std::vector<double> dist(n);
  for (std::size_t j = 0; j < n; ++j) dist[j] = (gallery_unit.col(static_cast<Eigen::Index>(j)) - query_unit).norm();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

inline std::vector<std::size_t> rank_gallery(const Embedding& query, const std::vector<Embedding>& gallery) {
  if (gallery.empty()) throw EvaluationError("empty gallery");
  Eigen::MatrixXd g(query.size(), static_cast<Eigen::Index>(gallery.size()));
  for (std::size_t j = 0; j < gallery.size(); ++j) {
    if (gallery[j].size() != query.size()) throw DimensionError("gallery embedding dimension mismatch");
    g.col(static_cast<Eigen::Index>(j)) = gallery[j];
  }
  Eigen::MatrixXd q = query;
  return rank_gallery_normalized(normalize_columns(q).col(0), normalize_columns(g));
}

/// CMC, mAP and mINP from per-query relevance flags listed in ranked order.
/// AP averages precision at each relevant position; INP = (#relevant) / (1-based rank of the last
/// relevant item).
inline MetricsReport compute_metrics(const std::vector<std::vector<char>>& ranked_relevance,
                                     EvalDirection direction = EvalDirection::VisToIr) {
  MetricsReport r;
  r.direction = direction;
  std::size_t longest = 0;
  for (const auto& q : ranked_relevance) longest = std::max(longest, q.size());
  std::vector<double> first_hit_hist(longest, 0.0);
  double ap_sum = 0.0;
  double inp_sum = 0.0;
  for (const auto& q : ranked_relevance) {
    int relevant = 0;
    int first = -1;
    int last = -1;
    double ap = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (!q[k]) continue;
      ++relevant;
      if (first < 0) first = static_cast<int>(k);
      last = static_cast<int>(k);
      ap += static_cast<double>(relevant) / static_cast<double>(k + 1);
    }
    if (relevant == 0) {
      ++r.excluded_queries;
      continue;
    }
    ++r.num_queries;
    first_hit_hist[static_cast<std::size_t>(first)] += 1.0;
    ap_sum += ap / relevant;
    inp_sum += static_cast<double>(relevant) / static_cast<double>(last + 1);
  }
  r.cmc.assign(longest, 0.0);
  if (r.num_queries == 0) return r;
  double acc = 0.0;
  for (std::size_t k = 0; k < longest; ++k) {
    acc += first_hit_hist[k];
    r.cmc[k] = acc / r.num_queries;
  }
  r.map = ap_sum / r.num_queries;
  r.minp = inp_sum / r.num_queries;
  return r;
}

/// Embeds every sample of modality m (columns follow dataset order) and returns their identities.
inline Eigen::MatrixXd embed_modality(const ModelState& model, const Dataset& dataset, Modality m,
                                      std::vector<int>* identities = nullptr) {
  const auto idx = dataset.indices_of(m);
  Eigen::MatrixXd x(dataset.input_dim(), static_cast<Eigen::Index>(idx.size()));
  if (identities) identities->resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    x.col(static_cast<Eigen::Index>(i)) = dataset.samples[idx[i]].features;
    if (identities) (*identities)[i] = dataset.samples[idx[i]].identity;
  }
  return encode_batch(model, x, m);
}

/// Ranks the opposite modality for precomputed embeddings; relevance follows the alignment.
inline MetricsReport evaluate_embeddings(const Eigen::MatrixXd& emb_vis, const std::vector<int>& ids_vis,
                                         const Eigen::MatrixXd& emb_ir, const std::vector<int>& ids_ir,
                                         const std::vector<int>& alignment, EvalDirection direction,
                                         int threads = 1) {
  const bool v2i = direction == EvalDirection::VisToIr;
  const Eigen::MatrixXd q = normalize_columns(v2i ? emb_vis : emb_ir);
  const Eigen::MatrixXd g = normalize_columns(v2i ? emb_ir : emb_vis);
  const auto& qids = v2i ? ids_vis : ids_ir;
  const auto& gids = v2i ? ids_ir : ids_vis;
  if (g.cols() == 0) throw EvaluationError("empty gallery");

  // Map every identity of either modality to a shared person key; unaligned identities get
  // distinct keys so they are never relevant across modalities.
  int max_ir = 0;
  for (int r : ids_ir) max_ir = std::max(max_ir, r);
  std::vector<int> ir_key(static_cast<std::size_t>(max_ir + 1), -1);
  for (std::size_t v = 0; v < alignment.size(); ++v)
    if (alignment[v] != kNoMatch && alignment[v] <= max_ir) ir_key[static_cast<std::size_t>(alignment[v])] = static_cast<int>(v);
  auto vis_key = [&](int v) { return v; };
  auto irk = [&](int r) { return ir_key[static_cast<std::size_t>(r)] >= 0 ? ir_key[static_cast<std::size_t>(r)] : -2 - r; };
  auto qkey = [&](int id) { return v2i ? vis_key(id) : irk(id); };
  auto gkey = [&](int id) { return v2i ? irk(id) : vis_key(id); };

  std::vector<std::vector<char>> rel(static_cast<std::size_t>(q.cols()));
  parallel_for(rel.size(), threads, [&](std::size_t i) {
    const auto order = rank_gallery_normalized(q.col(static_cast<Eigen::Index>(i)), g);
    auto& r = rel[i];
    r.resize(order.size());
    const int k = qkey(qids[i]);
    for (std::size_t j = 0; j < order.size(); ++j) r[j] = gkey(gids[order[j]]) == k ? 1 : 0;
  });
  return compute_metrics(rel, direction);
}

/// Cross-modal retrieval over a dataset with known alignment: every sample of the query modality
/// against every sample of the other.
inline MetricsReport evaluate(const ModelState& model, const Dataset& dataset, EvalDirection direction,
                              const CorrespondenceSet* correspondences = nullptr, int threads = 1) {
  if (!dataset.ground_truth_alignment) throw EvaluationError("dataset has no ground-truth alignment");
  std::vector<int> ids_vis;
  std::vector<int> ids_ir;
  const Eigen::MatrixXd ev = embed_modality(model, dataset, Modality::Vis, &ids_vis);
  const Eigen::MatrixXd er = embed_modality(model, dataset, Modality::Ir, &ids_ir);
  MetricsReport r = evaluate_embeddings(ev, ids_vis, er, ids_ir, *dataset.ground_truth_alignment, direction, threads);
  if (correspondences) r.cre_recovery = recovery_rate(correspondences->pseudo_map, *dataset.ground_truth_alignment);
  return r;
}

/// Fraction of samples, pooled over both modalities, that the opposite modality's expert assigns to
/// the aligned identity. Samples of unaligned identities are left out.
inline double expert_cross_accuracy(const ModelState& model, const Dataset& dataset) {
  if (!dataset.ground_truth_alignment) throw EvaluationError("dataset has no ground-truth alignment");
  const auto& a = *dataset.ground_truth_alignment;
  const Eigen::MatrixXi vr = build_count_matrix(model, dataset, Direction::VisToIr).counts;
  const Eigen::MatrixXi rv = build_count_matrix(model, dataset, Direction::IrToVis).counts;
  long hit = 0;
  long total = 0;
  for (std::size_t v = 0; v < a.size(); ++v) {
    if (a[v] == kNoMatch) continue;
    const auto vi = static_cast<Eigen::Index>(v);
    hit += vr(vi, a[v]) + rv(a[v], vi);
    total += vr.row(vi).sum() + rv.row(a[v]).sum();
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

inline nlohmann::json metrics_json(const MetricsReport& r, std::size_t cmc_ranks = 20) {
  std::vector<double> head(r.cmc.begin(), r.cmc.begin() + static_cast<std::ptrdiff_t>(std::min(cmc_ranks, r.cmc.size())));
  nlohmann::json j = {{"direction", to_string(r.direction)},
                      {"cmc", head},
                      {"rank1", r.rank1()},
                      {"map", r.map},
                      {"minp", r.minp},
                      {"num_queries", r.num_queries},
                      {"excluded_queries", r.excluded_queries}};
  j["cre_recovery"] = r.cre_recovery ? nlohmann::json(*r.cre_recovery) : nlohmann::json();
  return j;
}

}  // namespace xmatch
