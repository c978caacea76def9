#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "xmatch/data.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/model.hpp"

namespace xmatch {

using BinaryMatrix = Eigen::MatrixXi;

/// counts(i, j): samples of identity i (query modality) whose argmax under the other modality's
/// expert is j.
struct CountMatrix {
  Eigen::MatrixXi counts;
};

/// One-to-one partial matching between the identities of two modalities.
struct DecisionMatrix {
  BinaryMatrix m;
};

/// Which samples are being predicted: VisToIr means visible samples scored by the infrared expert.
enum class Direction { VisToIr, IrToVis };

/// Tallies argmax predictions into a rows x cols count matrix.
inline CountMatrix tally_predictions(const std::vector<int>& true_ids, const std::vector<int>& predicted, int rows,
                                     int cols) {
  if (true_ids.size() != predicted.size()) throw DimensionError("label/prediction length mismatch");
  CountMatrix c{Eigen::MatrixXi::Zero(rows, cols)};
  for (std::size_t i = 0; i < true_ids.size(); ++i) {
    if (true_ids[i] < 0 || true_ids[i] >= rows || predicted[i] < 0 || predicted[i] >= cols)
      throw DimensionError("tally index out of range");
    ++c.counts(true_ids[i], predicted[i]);
  }
  return c;
}

/// Argmax (first maximum) of each column of a score block.
inline std::vector<int> argmax_columns(const Eigen::MatrixXd& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    Eigen::Index r = 0;
    scores.col(c).maxCoeff(&r);
    out[static_cast<std::size_t>(c)] = static_cast<int>(r);
  }
  return out;
}

/// Predicts every sample of one modality with the other modality's expert and tallies the votes.
inline CountMatrix build_count_matrix(const ModelState& model, const Dataset& dataset, Direction direction) {
  const Modality query = direction == Direction::VisToIr ? Modality::Vis : Modality::Ir;
  const Modality judge = other(query);
  const auto idx = dataset.indices_of(query);
  const int rows = dataset.num_ids(query);
  const int cols = static_cast<int>(model.expert(judge).num_classes());
  if (idx.empty()) return CountMatrix{Eigen::MatrixXi::Zero(rows, cols)};
  Eigen::MatrixXd x(dataset.input_dim(), static_cast<Eigen::Index>(idx.size()));
  std::vector<int> ids(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    x.col(static_cast<Eigen::Index>(i)) = dataset.samples[idx[i]].features;
    ids[i] = dataset.samples[idx[i]].identity;
  }
  const Eigen::MatrixXd emb = encode_batch(model, x, query);
  // Softmax is monotone, so argmax over logits equals argmax over probabilities.
  return tally_predictions(ids, argmax_columns(classifier_logits(model.expert(judge), emb)), rows, cols);
}

/// Greedy one-to-one selection: repeatedly take the largest remaining count, then retire its row
/// and column. Ties go to the smaller row, then the smaller column. Cells below min_count are
/// never selected.
inline DecisionMatrix count_priority_selection(const CountMatrix& counts, int min_count = 1) {
  if (min_count < 1) throw ConfigError("min_count must be >= 1");
  const auto& c = counts.counts;
  if ((c.array() < 0).any()) throw DimensionError("negative count");
  std::vector<std::tuple<int, Eigen::Index, Eigen::Index>> cells;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      if (c(i, j) >= min_count) cells.emplace_back(c(i, j), i, j);
  std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });
  DecisionMatrix out{BinaryMatrix::Zero(c.rows(), c.cols())};
  std::vector<char> row_used(static_cast<std::size_t>(c.rows()), 0);
  std::vector<char> col_used(static_cast<std::size_t>(c.cols()), 0);
  for (const auto& [count, i, j] : cells) {
    if (row_used[static_cast<std::size_t>(i)] || col_used[static_cast<std::size_t>(j)]) continue;
    out.m(i, j) = 1;
    row_used[static_cast<std::size_t>(i)] = 1;
    col_used[static_cast<std::size_t>(j)] = 1;
  }
  return out;
}

/// Pairs both experts agree on: m_vr elementwise-times m_rv transposed.
inline BinaryMatrix consistent_matrix(const BinaryMatrix& m_vr, const BinaryMatrix& m_rv) {
  if (m_vr.rows() != m_rv.cols() || m_vr.cols() != m_rv.rows())
    throw DimensionError("consistent_matrix: shapes are not transposes of each other");
  return m_vr.cwiseProduct(m_rv.transpose());
}

/// Pairs claimed by the forward expert whose two endpoints the reverse expert never touched.
/// m_fwd is C^t x C^tbar, m_rev is C^tbar x C^t.
inline BinaryMatrix single_matrix(const BinaryMatrix& m_fwd, const BinaryMatrix& m_rev) {
  if (m_fwd.rows() != m_rev.cols() || m_fwd.cols() != m_rev.rows())
    throw DimensionError("single_matrix: shapes are not transposes of each other");
  const Eigen::VectorXi rev_row_sums = m_rev.rowwise().sum();  // indexed by tbar identity
  const Eigen::VectorXi rev_col_sums = m_rev.colwise().sum().transpose();  // indexed by t identity
  BinaryMatrix out = BinaryMatrix::Zero(m_fwd.rows(), m_fwd.cols());
  for (Eigen::Index i = 0; i < m_fwd.rows(); ++i)
    for (Eigen::Index j = 0; j < m_fwd.cols(); ++j)
      out(i, j) = m_fwd(i, j) * (rev_row_sums(j) == 0 ? 1 : 0) * (rev_col_sums(i) == 0 ? 1 : 0);
  return out;
}

/// Whatever remains of the two directional claims after removing consistent and single pairs.
/// Throws ConsistencyError if any entry falls outside {0, 1}.
inline BinaryMatrix contradictory_matrix(const BinaryMatrix& m_vr, const BinaryMatrix& m_rv, const BinaryMatrix& m_c,
                                         const BinaryMatrix& m_s_vr, const BinaryMatrix& m_s_rv) {
  if (m_c.rows() != m_vr.rows() || m_c.cols() != m_vr.cols() || m_s_vr.rows() != m_vr.rows() ||
      m_s_vr.cols() != m_vr.cols() || m_s_rv.rows() != m_rv.rows() || m_s_rv.cols() != m_rv.cols() ||
      m_rv.rows() != m_vr.cols() || m_rv.cols() != m_vr.rows())
    throw DimensionError("contradictory_matrix: shape mismatch");
  BinaryMatrix w = m_vr + m_rv.transpose() - 2 * m_c - (m_s_vr + m_s_rv.transpose());
  if ((w.array() < 0).any() || (w.array() > 1).any())
    throw ConsistencyError("contradictory matrix has entries outside {0,1}");
  return w;
}

/// Fused cross-modal identity relations of one refresh round.
struct CorrespondenceSet {
  BinaryMatrix m_vr;    // C^v x C^r
  BinaryMatrix m_rv;    // C^r x C^v
  BinaryMatrix m_c;     // C^v x C^r
  BinaryMatrix m_s_vr;  // C^v x C^r
  BinaryMatrix m_s_rv;  // C^r x C^v
  BinaryMatrix m_w;     // C^v x C^r
  /// Visible identity -> infrared identity from M_c, then M_s; kNoMatch elsewhere.
  std::vector<int> pseudo_map;
  /// Visible identity -> conflicting infrared candidates K (only identities with M_w entries).
  std::map<int, std::vector<int>> conflict_sets;

  int num_consistent() const { return m_c.sum(); }
  int num_single() const { return m_s_vr.sum() + m_s_rv.sum(); }
  int num_contradictory() const { return m_w.sum(); }
};

inline bool is_one_to_one(const BinaryMatrix& m) {
  if ((m.array() < 0).any() || (m.array() > 1).any()) return false;
  return (m.rowwise().sum().array() <= 1).all() && (m.colwise().sum().array() <= 1).all();
}

/// Verifies binary entries, the decomposition identity, disjoint supports and an injective pseudo map.
inline void check_invariants(const CorrespondenceSet& s) {
  for (const BinaryMatrix* m : {&s.m_c, &s.m_s_vr, &s.m_s_rv, &s.m_w})
    if ((m->array() < 0).any() || (m->array() > 1).any()) throw ConsistencyError("non-binary correspondence matrix");
  if (!is_one_to_one(s.m_vr) || !is_one_to_one(s.m_rv)) throw ConsistencyError("decision matrix is not one-to-one");
  const BinaryMatrix lhs = s.m_vr + s.m_rv.transpose();
  const BinaryMatrix ms = s.m_s_vr + s.m_s_rv.transpose();
  if (lhs != BinaryMatrix(2 * s.m_c + ms + s.m_w)) throw ConsistencyError("decomposition identity violated");
  if ((s.m_c.cwiseProduct(ms).array() != 0).any() || (s.m_c.cwiseProduct(s.m_w).array() != 0).any() ||
      (ms.cwiseProduct(s.m_w).array() != 0).any() || (s.m_s_vr.cwiseProduct(s.m_s_rv.transpose()).array() != 0).any())
    throw ConsistencyError("correspondence supports overlap");
  std::vector<char> used(static_cast<std::size_t>(s.m_c.cols()), 0);
  for (int r : s.pseudo_map) {
    if (r == kNoMatch) continue;
    if (used[static_cast<std::size_t>(r)]) throw ConsistencyError("pseudo map is not injective");
    used[static_cast<std::size_t>(r)] = 1;
  }
}

/// Fuses two directional decision matrices into consistent, single and contradictory relations.
inline CorrespondenceSet fuse_decisions(const DecisionMatrix& vr, const DecisionMatrix& rv) {
  CorrespondenceSet s;
  s.m_vr = vr.m;
  s.m_rv = rv.m;
  s.m_c = consistent_matrix(vr.m, rv.m);
  s.m_s_vr = single_matrix(vr.m, rv.m);
  s.m_s_rv = single_matrix(rv.m, vr.m);
  s.m_w = contradictory_matrix(vr.m, rv.m, s.m_c, s.m_s_vr, s.m_s_rv);

  const auto cv = s.m_c.rows();
  const auto cr = s.m_c.cols();
  s.pseudo_map.assign(static_cast<std::size_t>(cv), kNoMatch);
  for (Eigen::Index v = 0; v < cv; ++v)
    for (Eigen::Index r = 0; r < cr; ++r)
      if (s.m_c(v, r)) s.pseudo_map[static_cast<std::size_t>(v)] = static_cast<int>(r);
  for (Eigen::Index v = 0; v < cv; ++v) {
    if (s.pseudo_map[static_cast<std::size_t>(v)] != kNoMatch) continue;
    for (Eigen::Index r = 0; r < cr; ++r)
      if (s.m_s_vr(v, r) || s.m_s_rv(r, v)) {
        s.pseudo_map[static_cast<std::size_t>(v)] = static_cast<int>(r);
        break;
      }
  }
  for (Eigen::Index v = 0; v < cv; ++v)
    for (Eigen::Index r = 0; r < cr; ++r)
      if (s.m_w(v, r)) s.conflict_sets[static_cast<int>(v)].push_back(static_cast<int>(r));
  check_invariants(s);
  return s;
}

/// Full relationship-establishment round over a dataset: both count matrices, greedy selection in
/// each direction, then fusion.
inline CorrespondenceSet build_correspondences(const ModelState& model, const Dataset& dataset, int min_count = 1) {
  const auto vr = count_priority_selection(build_count_matrix(model, dataset, Direction::VisToIr), min_count);
  const auto rv = count_priority_selection(build_count_matrix(model, dataset, Direction::IrToVis), min_count);
  return fuse_decisions(vr, rv);
}

/// Which relations feed training. Full uses every fused relation; the others reproduce ablations.
enum class CorrespondenceMode {
  Full,            // M_c + M_s pseudo-labels, M_w conflicts
  ConsistentOnly,  // M_c alone
  VisToIrOnly,     // the visible-to-infrared decision matrix alone
  IrToVisOnly,     // the infrared-to-visible decision matrix alone
};

/// Per-identity targets derived from a correspondence set for the chosen mode.
struct CorrespondenceTargets {
  std::vector<int> pseudo;                   // visible id -> infrared id, shared-classifier target
  std::vector<int> matched;                  // visible id -> infrared id, "same identity" relation
  std::vector<int> matched_inv;              // infrared id -> visible id
  std::vector<std::vector<int>> conflicts;   // visible id -> K
};

inline CorrespondenceTargets targets_for(const CorrespondenceSet& s, CorrespondenceMode mode) {
  const auto cv = s.m_c.rows();
  const auto cr = s.m_c.cols();
  BinaryMatrix rel;
  switch (mode) {
    case CorrespondenceMode::Full:
    case CorrespondenceMode::ConsistentOnly: rel = s.m_c; break;
    case CorrespondenceMode::VisToIrOnly: rel = s.m_vr; break;
    case CorrespondenceMode::IrToVisOnly: rel = s.m_rv.transpose(); break;
  }
  CorrespondenceTargets t;
  t.matched.assign(static_cast<std::size_t>(cv), kNoMatch);
  t.matched_inv.assign(static_cast<std::size_t>(cr), kNoMatch);
  t.conflicts.assign(static_cast<std::size_t>(cv), {});
  for (Eigen::Index v = 0; v < cv; ++v)
    for (Eigen::Index r = 0; r < cr; ++r)
      if (rel(v, r)) {
        t.matched[static_cast<std::size_t>(v)] = static_cast<int>(r);
        t.matched_inv[static_cast<std::size_t>(r)] = static_cast<int>(v);
      }
  if (mode == CorrespondenceMode::Full) {
    t.pseudo = s.pseudo_map;
    for (const auto& [v, k] : s.conflict_sets) t.conflicts[static_cast<std::size_t>(v)] = k;
  } else {
    t.pseudo = t.matched;
  }
  return t;
}

/// Fraction of ground-truth aligned pairs reproduced by a visible->infrared map.
inline double recovery_rate(const std::vector<int>& pseudo, const std::vector<int>& alignment) {
  int total = 0;
  int hit = 0;
  for (std::size_t v = 0; v < alignment.size(); ++v) {
    if (alignment[v] == kNoMatch) continue;
    ++total;
    if (v < pseudo.size() && pseudo[v] == alignment[v]) ++hit;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / total;
}

inline nlohmann::json matrix_json(const BinaryMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

/// JSON dump of one refresh round.
inline nlohmann::json correspondence_json(const CorrespondenceSet& s, int epoch) {
  nlohmann::json pseudo = nlohmann::json::object();
  for (std::size_t v = 0; v < s.pseudo_map.size(); ++v)
    if (s.pseudo_map[v] != kNoMatch) pseudo[std::to_string(v)] = s.pseudo_map[v];
  nlohmann::json conflicts = nlohmann::json::object();
  for (const auto& [v, k] : s.conflict_sets) conflicts[std::to_string(v)] = k;
  return {{"epoch", epoch},
          {"m_vr", matrix_json(s.m_vr)},
          {"m_rv", matrix_json(s.m_rv)},
          {"m_c", matrix_json(s.m_c)},
          {"m_s_vr", matrix_json(s.m_s_vr)},
          {"m_s_rv", matrix_json(s.m_s_rv)},
          {"m_s", matrix_json(s.m_s_vr + s.m_s_rv.transpose())},
          {"m_w", matrix_json(s.m_w)},
          {"pseudo_map", pseudo},
          {"conflict_sets", conflicts}};
}

}  // namespace xmatch
