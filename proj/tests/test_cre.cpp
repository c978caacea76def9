#include <gtest/gtest.h>

#include "support.hpp"

using namespace xt;

namespace {

BinaryMatrix mat(std::initializer_list<std::initializer_list<int>> rows) {
  BinaryMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (int v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

CountMatrix counts(std::initializer_list<std::initializer_list<int>> rows) { return CountMatrix{mat(rows)}; }

// Synthetic data where both modalities see exactly the same feature vectors per person, and a
// model whose experts classify by nearest identity center in embedding space.
struct PerfectSetup {
  Dataset data;
  ModelState model;
};

PerfectSetup perfect_setup(int ids, int per_id) {
  SynthConfig sc;
  sc.num_identities = ids;
  sc.samples_per_id_per_modality = per_id;
  sc.modality_gap = 0;
  sc.noise_sigma = 0;
  sc.transform_jitter = 0;
  PerfectSetup s{generate_synthetic(sc), {}};
  ModelConfig mc;
  mc.dims = {sc.input_dim, 12, 12, 8};
  mc.front_layers = 1;
  s.model = init_model(mc, ids, ids, 3);
  for (Modality m : {Modality::Vis, Modality::Ir}) {
    Classifier& w = s.model.expert(m);
    const auto groups = s.data.by_identity(m);
    for (int id = 0; id < ids; ++id) {
      const Embedding e = encode(s.model, s.data.samples[groups[static_cast<std::size_t>(id)][0]].features, m);
      w.weight.col(id) = e;
      w.bias(id) = -0.5 * e.squaredNorm();
    }
  }
  return s;
}

}  // namespace

TEST(CountMatrix, ConstantPredictor) {
  SynthConfig sc;
  sc.num_identities = 2;
  sc.samples_per_id_per_modality = 3;
  const Dataset d = generate_synthetic(sc);
  ModelConfig mc;
  mc.dims = {16, 4, 4};
  mc.front_layers = 1;
  ModelState m = init_model(mc, 2, 2, 1);
  m.expert_ir.weight.setZero();
  m.expert_ir.bias << 5, 0;
  EXPECT_EQ(build_count_matrix(m, d, Direction::VisToIr).counts, mat({{3, 0}, {3, 0}}));
}

TEST(CountMatrix, PerfectExpertGivesScaledPermutation) {
  const PerfectSetup s = perfect_setup(6, 4);
  const auto& a = *s.data.ground_truth_alignment;
  BinaryMatrix expect = BinaryMatrix::Zero(6, 6);
  for (int v = 0; v < 6; ++v) expect(v, a[static_cast<std::size_t>(v)]) = 4;
  EXPECT_EQ(build_count_matrix(s.model, s.data, Direction::VisToIr).counts, expect);
  EXPECT_EQ(build_count_matrix(s.model, s.data, Direction::IrToVis).counts, BinaryMatrix(expect.transpose()));
}

TEST(CountMatrix, TallyMatchesDirectCount) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const int rows = uniform_int(rng, 1, 6);
    const int cols = uniform_int(rng, 1, 6);
    std::vector<int> truth;
    std::vector<int> pred;
    for (int n = uniform_int(rng, 0, 40); n > 0; --n) {
      truth.push_back(uniform_int(rng, 0, rows - 1));
      pred.push_back(uniform_int(rng, 0, cols - 1));
    }
    const CountMatrix c = tally_predictions(truth, pred, rows, cols);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        int n = 0;
        for (std::size_t k = 0; k < truth.size(); ++k) n += truth[k] == i && pred[k] == j;
        EXPECT_EQ(c.counts(i, j), n);
      }
  }
  EXPECT_THROW(tally_predictions({0, 1}, {0}, 2, 2), DimensionError);
  EXPECT_THROW(tally_predictions({2}, {0}, 2, 2), DimensionError);
}

TEST(CountPrioritySelection, HandExamples) {
  EXPECT_EQ(count_priority_selection(counts({{5, 1}, {0, 4}})).m, mat({{1, 0}, {0, 1}}));
  EXPECT_EQ(count_priority_selection(counts({{2, 2}, {2, 2}})).m, mat({{1, 0}, {0, 1}}));
  EXPECT_EQ(count_priority_selection(counts({{0, 0}, {0, 0}})).m, mat({{0, 0}, {0, 0}}));
  // Row 1 has the largest count; row 0 gets what is left.
  EXPECT_EQ(count_priority_selection(counts({{3, 2}, {4, 0}})).m, mat({{0, 1}, {1, 0}}));
}

TEST(CountPrioritySelection, TiesGoToSmallerRowThenColumn) {
  EXPECT_EQ(count_priority_selection(counts({{0, 3, 3}, {3, 0, 0}})).m, mat({{0, 1, 0}, {1, 0, 0}}));
  EXPECT_EQ(count_priority_selection(counts({{0, 0}, {2, 2}, {2, 0}})).m, mat({{0, 0}, {1, 0}, {0, 0}}));
}

TEST(CountPrioritySelection, MinCountAbstains) {
  EXPECT_EQ(count_priority_selection(counts({{5, 1}, {0, 2}}), 3).m, mat({{1, 0}, {0, 0}}));
  EXPECT_THROW(count_priority_selection(counts({{1}}), 0), ConfigError);
}

TEST(CountPrioritySelection, MatchesRepeatedScanOracle) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 1000; ++t) {
    const int rows = uniform_int(rng, 1, 8);
    const int cols = uniform_int(rng, 1, 8);
    Eigen::MatrixXi c(rows, cols);
    const int hi = uniform_int(rng, 0, 6);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) c(i, j) = uniform_int(rng, 0, hi);
    const int min_count = uniform_int(rng, 1, 3);
    const BinaryMatrix m = count_priority_selection(CountMatrix{c}, min_count).m;
    EXPECT_EQ(m, cps_ref(c, min_count)) << c;
    EXPECT_TRUE(is_one_to_one(m));
    EXPECT_EQ((m.array() * (c.array() < min_count).cast<int>()).sum(), 0) << "selected a cell below min_count";
  }
}

TEST(ConsistentMatrix, HandExamples) {
  const BinaryMatrix eye = BinaryMatrix::Identity(2, 2);
  EXPECT_EQ(consistent_matrix(eye, eye), eye);
  EXPECT_EQ(consistent_matrix(eye, mat({{0, 1}, {1, 0}})), BinaryMatrix::Zero(2, 2));
  EXPECT_THROW(consistent_matrix(BinaryMatrix::Zero(2, 3), BinaryMatrix::Zero(2, 3)), DimensionError);
}

TEST(SingleMatrix, HandExamples) {
  EXPECT_EQ(single_matrix(mat({{1, 0}, {0, 0}}), BinaryMatrix::Zero(2, 2)), mat({{1, 0}, {0, 0}}));
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    BinaryMatrix perm = random_one_to_one(4, 4, rng, 1.0);
    EXPECT_EQ(single_matrix(random_one_to_one(4, 4, rng), perm), BinaryMatrix::Zero(4, 4));
  }
}

TEST(ContradictoryMatrix, CompetingCandidates) {
  const BinaryMatrix vr = mat({{1, 0}, {0, 0}});
  const BinaryMatrix rv = mat({{0, 0}, {1, 0}});
  const CorrespondenceSet s = fuse_decisions({vr}, {rv});
  EXPECT_EQ(s.m_c, BinaryMatrix::Zero(2, 2));
  EXPECT_EQ(s.m_w, mat({{1, 1}, {0, 0}}));
  ASSERT_EQ(s.conflict_sets.size(), 1u);
  EXPECT_EQ(s.conflict_sets.at(0), (std::vector<int>{0, 1}));
  EXPECT_EQ(s.pseudo_map, (std::vector<int>{kNoMatch, kNoMatch}));
}

TEST(ContradictoryMatrix, AgreeingPermutationsLeaveNothing) {
  std::mt19937_64 rng(4);
  const BinaryMatrix p = random_one_to_one(5, 5, rng, 1.0);
  const CorrespondenceSet s = fuse_decisions({p}, {BinaryMatrix(p.transpose())});
  EXPECT_EQ(s.m_w, BinaryMatrix::Zero(5, 5));
  EXPECT_EQ(s.m_c, p);
}

TEST(ContradictoryMatrix, RejectsOutOfRangeResult) {
  const BinaryMatrix z = BinaryMatrix::Zero(2, 2);
  // A consistent matrix that the decisions do not support drives an entry negative.
  EXPECT_THROW(contradictory_matrix(z, z, BinaryMatrix::Identity(2, 2), z, z), ConsistencyError);
}

TEST(FuseDecisions, AgreementOnOnePairOnly) {
  const CorrespondenceSet s = fuse_decisions({mat({{1, 0}, {0, 0}})}, {mat({{1, 0}, {0, 0}})});
  EXPECT_EQ(s.pseudo_map, (std::vector<int>{0, kNoMatch}));
  EXPECT_TRUE(s.conflict_sets.empty());
  EXPECT_EQ(s.num_consistent(), 1);
}

TEST(FuseDecisions, SinglesFillPseudoMapAfterConsistent) {
  // vis 0 <-> ir 0 agreed; vis 1 -> ir 1 claimed only forward; ir 2 -> vis 2 claimed only backward.
  const BinaryMatrix vr = mat({{1, 0, 0}, {0, 1, 0}, {0, 0, 0}});
  const BinaryMatrix rv = mat({{1, 0, 0}, {0, 0, 0}, {0, 0, 1}});
  const CorrespondenceSet s = fuse_decisions({vr}, {rv});
  EXPECT_EQ(s.pseudo_map, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(s.num_single(), 2);
  EXPECT_EQ(s.num_contradictory(), 0);
}

TEST(FuseDecisions, RandomPairsMatchOraclesAndDecompose) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 1000; ++t) {
    const int cv = uniform_int(rng, 2, 8);
    const int cr = uniform_int(rng, 2, 8);
    const BinaryMatrix vr = random_one_to_one(cv, cr, rng, uniform_real(rng, 0.2, 1.0));
    const BinaryMatrix rv = random_one_to_one(cr, cv, rng, uniform_real(rng, 0.2, 1.0));
    const CorrespondenceSet s = fuse_decisions({vr}, {rv});
    ASSERT_EQ(s.m_c, consistent_ref(vr, rv));
    ASSERT_EQ(s.m_s_vr, single_ref(vr, rv));
    ASSERT_EQ(s.m_s_rv, single_ref(rv, vr));
    const BinaryMatrix ms = s.m_s_vr + s.m_s_rv.transpose();
    for (int i = 0; i < cv; ++i)
      for (int j = 0; j < cr; ++j) {
        ASSERT_EQ(vr(i, j) + rv(j, i), 2 * s.m_c(i, j) + ms(i, j) + s.m_w(i, j));
        ASSERT_TRUE(s.m_w(i, j) == 0 || s.m_w(i, j) == 1);
        ASSERT_LE(s.m_c(i, j) + ms(i, j) + s.m_w(i, j), 1);
      }
    EXPECT_NO_THROW(check_invariants(s));
    // Every pseudo-label comes from M_c or M_s, and M_c wins.
    for (int v = 0; v < cv; ++v) {
      const int r = s.pseudo_map[static_cast<std::size_t>(v)];
      if (s.m_c.row(v).sum() == 1) {
        Eigen::Index j = 0;
        s.m_c.row(v).maxCoeff(&j);
        EXPECT_EQ(r, j);
      } else if (r != kNoMatch) {
        EXPECT_EQ(ms(v, r), 1);
      }
    }
  }
}

TEST(BuildCorrespondences, PerfectExpertsRecoverAlignment) {
  const PerfectSetup s = perfect_setup(8, 3);
  const CorrespondenceSet c = build_correspondences(s.model, s.data);
  EXPECT_EQ(c.pseudo_map, *s.data.ground_truth_alignment);
  EXPECT_EQ(recovery_rate(c.pseudo_map, *s.data.ground_truth_alignment), 1.0);
  EXPECT_EQ(c.num_consistent(), 8);
}

TEST(TargetsFor, ModesSelectTheirSource) {
  const BinaryMatrix vr = mat({{1, 0, 0}, {0, 1, 0}, {0, 0, 0}});
  const BinaryMatrix rv = mat({{1, 0, 0}, {0, 0, 0}, {0, 0, 1}});
  const CorrespondenceSet s = fuse_decisions({vr}, {rv});

  const auto full = targets_for(s, CorrespondenceMode::Full);
  EXPECT_EQ(full.pseudo, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(full.matched, (std::vector<int>{0, kNoMatch, kNoMatch}));
  EXPECT_EQ(full.matched_inv, (std::vector<int>{0, kNoMatch, kNoMatch}));

  const auto cons = targets_for(s, CorrespondenceMode::ConsistentOnly);
  EXPECT_EQ(cons.pseudo, (std::vector<int>{0, kNoMatch, kNoMatch}));
  EXPECT_EQ(cons.conflicts, std::vector<std::vector<int>>(3));

  const auto fwd = targets_for(s, CorrespondenceMode::VisToIrOnly);
  EXPECT_EQ(fwd.pseudo, (std::vector<int>{0, 1, kNoMatch}));
  EXPECT_EQ(fwd.matched_inv, (std::vector<int>{0, 1, kNoMatch}));

  const auto back = targets_for(s, CorrespondenceMode::IrToVisOnly);
  EXPECT_EQ(back.pseudo, (std::vector<int>{0, kNoMatch, 2}));
}

TEST(TargetsFor, FullModeCarriesConflicts) {
  const CorrespondenceSet s = fuse_decisions({mat({{1, 0}, {0, 0}})}, {mat({{0, 0}, {1, 0}})});
  const auto t = targets_for(s, CorrespondenceMode::Full);
  EXPECT_EQ(t.conflicts[0], (std::vector<int>{0, 1}));
  EXPECT_TRUE(t.conflicts[1].empty());
}

TEST(RecoveryRate, CountsOnlyAlignedIdentities) {
  EXPECT_DOUBLE_EQ(recovery_rate({1, 0, 2}, {1, 2, kNoMatch}), 0.5);
  EXPECT_DOUBLE_EQ(recovery_rate({}, {kNoMatch}), 0.0);
}

TEST(CorrespondenceJson, ContainsMatricesAndMaps) {
  const CorrespondenceSet s = fuse_decisions({mat({{1, 0}, {0, 0}})}, {mat({{0, 0}, {1, 0}})});
  const nlohmann::json j = correspondence_json(s, 7);
  EXPECT_EQ(j.at("epoch"), 7);
  EXPECT_EQ(j.at("m_w"), nlohmann::json::parse("[[1,1],[0,0]]"));
  EXPECT_EQ(j.at("m_c"), nlohmann::json::parse("[[0,0],[0,0]]"));
  EXPECT_EQ(j.at("conflict_sets"), nlohmann::json::parse(R"({"0":[0,1]})"));
  EXPECT_TRUE(j.at("pseudo_map").empty());
  for (const char* k : {"m_vr", "m_rv", "m_s", "m_s_vr", "m_s_rv"}) EXPECT_TRUE(j.contains(k)) << k;
}
