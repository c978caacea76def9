#include <gtest/gtest.h>

#include "support.hpp"

using namespace xt;

TEST(PrototypeUpdate, BoundaryMomenta) {
  std::mt19937_64 rng(1);
  PrototypeBank keep = initialized_bank(3, 2, 1.0, rng);
  const Eigen::MatrixXd before = keep.protos_vis;
  update(keep, 1, Modality::Vis, Eigen::Vector3d(7, 8, 9));
  EXPECT_EQ(keep.protos_vis, before);

  PrototypeBank replace = initialized_bank(3, 2, 0.0, rng);
  update(replace, 0, Modality::Ir, Eigen::Vector3d(7, 8, 9));
  EXPECT_EQ(replace.protos_ir.col(0), Eigen::Vector3d(7, 8, 9));
}

TEST(PrototypeUpdate, HandExample) {
  PrototypeBank b = empty_bank(2, 1, 1, 0.8);
  b.protos_vis.col(0) = Eigen::Vector2d(1, 0);
  b.initialized_vis[0] = 1;
  update(b, 0, Modality::Vis, Eigen::Vector2d(0, 1));
  EXPECT_NEAR(b.protos_vis(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(b.protos_vis(1, 0), 0.2, 1e-15);
}

TEST(PrototypeUpdate, ConvexStepAndLocality) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 1000; ++t) {
    const double lambda = uniform_real(rng, 0.0, 1.0);
    const int c = uniform_int(rng, 2, 5);
    PrototypeBank b = initialized_bank(uniform_int(rng, 1, 6), c, lambda, rng);
    const Modality m = uniform_int(rng, 0, 1) ? Modality::Vis : Modality::Ir;
    const int id = uniform_int(rng, 0, c - 1);
    const Eigen::VectorXd mean = random_matrix(b.protos(m).rows(), 1, rng, 3.0).col(0);
    const PrototypeBank old = b;
    update(b, id, m, mean);
    const Eigen::VectorXd p_old = old.protos(m).col(id);
    const Eigen::VectorXd p_new = b.protos(m).col(id);
    const double moved = (p_new - p_old).norm();
    const double bound = (1.0 - lambda) * (mean - p_old).norm();
    EXPECT_NEAR(moved, bound, 1e-12 * std::max(1.0, bound));
    // The new prototype lies on the segment between the old one and the batch mean.
    EXPECT_NEAR((p_new - p_old).norm() + (mean - p_new).norm(), (mean - p_old).norm(), 1e-12 * std::max(1.0, bound));
    for (int other = 0; other < c; ++other) {
      if (other == id) continue;
      EXPECT_EQ(b.protos(m).col(other), old.protos(m).col(other));
    }
    EXPECT_EQ(b.protos(xmatch::other(m)), old.protos(xmatch::other(m)));
  }
}

TEST(PrototypeUpdate, UninitializedIdentityTakesBatchMean) {
  PrototypeBank b = empty_bank(2, 2, 2, 0.8);
  update(b, 1, Modality::Ir, Eigen::Vector2d(3, 4));
  EXPECT_EQ(b.protos_ir.col(1), Eigen::Vector2d(3, 4));
  EXPECT_TRUE(b.is_initialized(Modality::Ir, 1));
  EXPECT_FALSE(b.is_initialized(Modality::Ir, 0));
  EXPECT_FALSE(b.is_initialized(Modality::Vis, 1));
}

TEST(PrototypeUpdate, Errors) {
  PrototypeBank b = empty_bank(2, 2, 2, 0.8);
  EXPECT_THROW(update(b, 2, Modality::Vis, Eigen::Vector2d(0, 0)), DimensionError);
  EXPECT_THROW(update(b, 0, Modality::Vis, Eigen::Vector3d(0, 0, 0)), DimensionError);
  EXPECT_THROW(empty_bank(2, 2, 2, 1.5), ConfigError);
  EXPECT_THROW(empty_bank(2, 2, 2, -0.1), ConfigError);
}

TEST(UpdateFromBatch, UsesPerIdentityBatchMean) {
  PrototypeBank b = empty_bank(2, 3, 3, 0.5);
  Eigen::MatrixXd emb(2, 3);
  emb << 1, 0, 4,
         0, 1, 4;
  update_from_batch(b, Modality::Vis, emb, {0, 0, 2});
  EXPECT_EQ(b.protos_vis.col(0), Eigen::Vector2d(0.5, 0.5));
  EXPECT_EQ(b.protos_vis.col(2), Eigen::Vector2d(4, 4));
  EXPECT_FALSE(b.is_initialized(Modality::Vis, 1));
  update_from_batch(b, Modality::Vis, emb.leftCols(1), {0});
  EXPECT_EQ(b.protos_vis.col(0), Eigen::Vector2d(0.75, 0.25));
}

TEST(InitBank, PrototypesAreIdentityMeans) {
  // One linear trunk layer set to the identity, so embeddings equal inputs.
  ModelConfig mc;
  mc.dims = {2, 2};
  mc.front_layers = 0;
  ModelState m = init_model(mc, 2, 1, 1);
  m.trunk[0].weight.setIdentity();
  m.trunk[0].bias.setZero();
  Dataset d;
  d.num_ids_vis = 2;
  d.num_ids_ir = 1;
  d.samples = {{Eigen::Vector2d(1, 0), Modality::Vis, 0},
               {Eigen::Vector2d(0, 1), Modality::Vis, 0},
               {Eigen::Vector2d(3, 3), Modality::Vis, 1},
               {Eigen::Vector2d(-1, 2), Modality::Ir, 0}};
  const PrototypeBank b = init_bank(m, d);
  EXPECT_EQ(b.protos_vis.col(0), Eigen::Vector2d(0.5, 0.5));
  EXPECT_EQ(b.protos_vis.col(1), Eigen::Vector2d(3, 3));
  EXPECT_EQ(b.protos_ir.col(0), Eigen::Vector2d(-1, 2));
  EXPECT_DOUBLE_EQ(b.momentum, 0.8);
}

TEST(InitBank, MatchesDirectMeanOnRandomData) {
  SynthConfig sc;
  sc.num_identities = 5;
  sc.samples_per_id_per_modality = 4;
  const Dataset d = generate_synthetic(sc);
  ModelConfig mc;
  mc.dims = {16, 6, 6, 4};
  mc.front_layers = 1;
  mc.shared_front_init = false;
  const ModelState m = init_model(mc, 5, 5, 2);
  const PrototypeBank b = init_bank(m, d);
  for (Modality mod : {Modality::Vis, Modality::Ir}) {
    const auto groups = d.by_identity(mod);
    for (int id = 0; id < 5; ++id) {
      Vec mean(4, 0.0);
      for (std::size_t i : groups[static_cast<std::size_t>(id)]) {
        const Embedding e = encode(m, d.samples[i].features, mod);
        for (int k = 0; k < 4; ++k) mean[static_cast<std::size_t>(k)] += e(k) / groups[static_cast<std::size_t>(id)].size();
      }
      for (int k = 0; k < 4; ++k) EXPECT_NEAR(b.protos(mod)(k, id), mean[static_cast<std::size_t>(k)], 1e-12);
    }
  }
}
