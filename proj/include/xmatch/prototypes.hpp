#pragma once

#include <Eigen/Dense>

#include <vector>

#include "xmatch/data.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/model.hpp"

namespace xmatch {

/// Per-identity embedding prototypes for both modalities, updated as an exponential moving
/// average. Columns are identities (d x C^t).
struct PrototypeBank {
  Eigen::MatrixXd protos_vis;
  Eigen::MatrixXd protos_ir;
  double momentum = 0.8;
  std::vector<char> initialized_vis;
  std::vector<char> initialized_ir;

  const Eigen::MatrixXd& protos(Modality m) const { return m == Modality::Vis ? protos_vis : protos_ir; }
  Eigen::MatrixXd& protos(Modality m) { return m == Modality::Vis ? protos_vis : protos_ir; }
  const std::vector<char>& initialized(Modality m) const { return m == Modality::Vis ? initialized_vis : initialized_ir; }
  std::vector<char>& initialized(Modality m) { return m == Modality::Vis ? initialized_vis : initialized_ir; }

  bool is_initialized(Modality m, int id) const {
    const auto& f = initialized(m);
    return id >= 0 && id < static_cast<int>(f.size()) && f[static_cast<std::size_t>(id)] != 0;
  }

  friend bool operator==(const PrototypeBank&, const PrototypeBank&) = default;
};

inline PrototypeBank empty_bank(Eigen::Index dim, int num_ids_vis, int num_ids_ir, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("prototype momentum must lie in [0, 1]");
  PrototypeBank b;
  b.protos_vis = Eigen::MatrixXd::Zero(dim, num_ids_vis);
  b.protos_ir = Eigen::MatrixXd::Zero(dim, num_ids_ir);
  b.momentum = momentum;
  b.initialized_vis.assign(static_cast<std::size_t>(num_ids_vis), 0);
  b.initialized_ir.assign(static_cast<std::size_t>(num_ids_ir), 0);
  return b;
}

/// Each prototype starts as the mean embedding of its identity over the whole dataset.
/// Identities without samples stay flagged uninitialized.
inline PrototypeBank init_bank(const ModelState& model, const Dataset& dataset, double momentum = 0.8) {
  PrototypeBank bank = empty_bank(model.embedding_dim(), dataset.num_ids_vis, dataset.num_ids_ir, momentum);
  for (Modality m : {Modality::Vis, Modality::Ir}) {
    const auto idx = dataset.indices_of(m);
    if (idx.empty()) continue;
    Eigen::MatrixXd x(dataset.input_dim(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = dataset.samples[idx[i]].features;
    const Eigen::MatrixXd emb = encode_batch(model, x, m);
    std::vector<int> counts(static_cast<std::size_t>(dataset.num_ids(m)), 0);
    auto& protos = bank.protos(m);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int id = dataset.samples[idx[i]].identity;
      protos.col(id) += emb.col(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(id)];
    }
    for (int id = 0; id < dataset.num_ids(m); ++id) {
      if (counts[static_cast<std::size_t>(id)] == 0) continue;
      protos.col(id) /= counts[static_cast<std::size_t>(id)];
      bank.initialized(m)[static_cast<std::size_t>(id)] = 1;
    }
  }
  return bank;
}

/// P <- momentum * P + (1 - momentum) * batch_mean. An uninitialized identity takes batch_mean.
inline void update(PrototypeBank& bank, int identity, Modality modality, const Embedding& batch_mean) {
  auto& protos = bank.protos(modality);
  if (identity < 0 || identity >= protos.cols()) throw DimensionError("prototype identity out of range");
  if (batch_mean.size() != protos.rows()) throw DimensionError("prototype dimension mismatch");
  auto& flag = bank.initialized(modality)[static_cast<std::size_t>(identity)];
  if (!flag) {
    protos.col(identity) = batch_mean;
    flag = 1;
    return;
  }
  protos.col(identity) = bank.momentum * protos.col(identity) + (1.0 - bank.momentum) * batch_mean;
}

/// Updates every identity present in a batch with the mean of its embeddings (columns of emb).
inline void update_from_batch(PrototypeBank& bank, Modality modality, const Eigen::MatrixXd& emb,
                              const std::vector<int>& labels) {
  const auto c = bank.protos(modality).cols();
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(emb.rows(), c);
  std::vector<int> counts(static_cast<std::size_t>(c), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    sums.col(labels[i]) += emb.col(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (Eigen::Index id = 0; id < c; ++id) {
    if (counts[static_cast<std::size_t>(id)] == 0) continue;
    update(bank, static_cast<int>(id), modality, sums.col(id) / counts[static_cast<std::size_t>(id)]);
  }
}

}  // namespace xmatch
