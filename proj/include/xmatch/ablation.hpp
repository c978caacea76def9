#pragma once

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xmatch/data.hpp"
#include "xmatch/eval.hpp"
#include "xmatch/trainer.hpp"

namespace xmatch {

struct AblationRun {
  Variant variant = Variant::B;
  std::uint64_t seed = 0;
  MetricsReport vis2ir;
  MetricsReport ir2vis;
  /// Pseudo-map accuracy after the last refresh (phase-2 variants with known alignment only).
  std::optional<double> recovery;
};

struct AblationRow {
  Variant variant = Variant::B;
  EvalDirection direction = EvalDirection::VisToIr;
  double rank1 = 0.0;
  double map = 0.0;
  double minp = 0.0;
  std::optional<double> recovery;
  int seeds = 0;
};

/// Synthetic data for one ablation seed: the base config with its sample stream offset by the seed.
inline SynthConfig seeded(SynthConfig c, std::uint64_t seed) {
  c.sample_seed += seed;
  return c;
}

/// Trains every variant on every seed. Phase 1 is trained once per seed and shared, so `b` is the
/// exact starting point of the other variants. Evaluation uses the dataset's own alignment.
inline std::vector<AblationRun> run_ablation(const std::function<Dataset(std::uint64_t)>& data_for_seed,
                                             const TrainConfig& base, const std::vector<Variant>& variants,
                                             const std::vector<std::uint64_t>& seeds, int threads = 1) {
  std::vector<AblationRun> runs;
  for (std::uint64_t seed : seeds) {
    const Dataset data = data_for_seed(seed);
    if (!data.ground_truth_alignment) throw EvaluationError("ablation needs a dataset with ground-truth alignment");
    TrainConfig cfg = base;
    cfg.seed = seed;
    const TrainResult p1 = train(data, cfg, Variant::B);
    for (Variant v : variants) {
      const TrainResult r = runs_phase2(v) ? train(data, cfg, v, {}, &p1) : p1;
      AblationRun run;
      run.variant = v;
      run.seed = seed;
      run.vis2ir = evaluate(r.model, data, EvalDirection::VisToIr, nullptr, threads);
      run.ir2vis = evaluate(r.model, data, EvalDirection::IrToVis, nullptr, threads);
      if (r.last_correspondences) {
        const auto t = targets_for(*r.last_correspondences, correspondence_mode(v));
        run.recovery = recovery_rate(t.pseudo, *data.ground_truth_alignment);
      }
      runs.push_back(run);
    }
  }
  return runs;
}

/// Seed means, one row per variant and direction, in the order variants were requested.
inline std::vector<AblationRow> summarize(const std::vector<AblationRun>& runs, const std::vector<Variant>& variants,
                                          const std::vector<EvalDirection>& directions) {
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    for (EvalDirection d : directions) {
      AblationRow row;
      row.variant = v;
      row.direction = d;
      double rec = 0.0;
      int nrec = 0;
      for (const auto& r : runs) {
        if (r.variant != v) continue;
        const MetricsReport& m = d == EvalDirection::VisToIr ? r.vis2ir : r.ir2vis;
        row.rank1 += m.rank1();
        row.map += m.map;
        row.minp += m.minp;
        ++row.seeds;
        if (r.recovery) {
          rec += *r.recovery;
          ++nrec;
        }
      }
      if (row.seeds > 0) {
        row.rank1 /= row.seeds;
        row.map /= row.seeds;
        row.minp /= row.seeds;
      }
      if (nrec > 0) row.recovery = rec / nrec;
      rows.push_back(row);
    }
  }
  return rows;
}

/// Mean Rank-1 of one variant over both directions.
inline double mean_rank1(const std::vector<AblationRun>& runs, Variant v) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : runs)
    if (r.variant == v) {
      s += r.vis2ir.rank1() + r.ir2vis.rank1();
      n += 2;
    }
  return n == 0 ? 0.0 : s / n;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,direction,seeds,rank1,map,minp,cre_recovery\n";
  for (const auto& r : rows) {
    out += to_string(r.variant) + "," + to_string(r.direction) + "," + std::to_string(r.seeds) + "," +
           format_double(r.rank1) + "," + format_double(r.map) + "," + format_double(r.minp) + "," +
           (r.recovery ? format_double(*r.recovery) : std::string()) + "\n";
  }
  return out;
}

inline nlohmann::json ablation_json(const std::vector<AblationRow>& rows, const std::vector<AblationRun>& runs) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows)
    table.push_back({{"variant", to_string(r.variant)},
                     {"direction", to_string(r.direction)},
                     {"seeds", r.seeds},
                     {"rank1", r.rank1},
                     {"map", r.map},
                     {"minp", r.minp},
                     {"cre_recovery", r.recovery ? nlohmann::json(*r.recovery) : nlohmann::json()}});
  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& r : runs)
    per_seed.push_back({{"variant", to_string(r.variant)},
                        {"seed", r.seed},
                        {"vis2ir", metrics_json(r.vis2ir)},
                        {"ir2vis", metrics_json(r.ir2vis)},
                        {"cre_recovery", r.recovery ? nlohmann::json(*r.recovery) : nlohmann::json()}});
  return {{"table", table}, {"runs", per_seed}};
}

}  // namespace xmatch
