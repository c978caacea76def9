// xmatch command-line driver: gen-data, train, eval, ablate.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "xmatch/xmatch.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xmatch;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << bytes;
  if (!out) throw IoError("write failed: " + p.string());
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Config file layout: {"synth": {...}, "train": {...}}; either block may be missing.
json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    json j = json::parse(read_file(path));
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

template <typename T>
T block_or(const json& cfg, const char* key, T fallback) {
  if (!cfg.contains(key)) return fallback;
  const json& block = cfg.at(key);
  if (!block.is_object()) throw ConfigError(std::string("config block '") + key + "' must be an object");
  json merged = fallback;
  for (const auto& [k, v] : block.items())
    if (!merged.contains(k)) throw ConfigError(std::string("unknown key '") + k + "' in config block '" + key + "'");
  try {
    merged.merge_patch(block);
    return merged.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config block '") + key + "': " + e.what());
  }
}

std::string config_hash(const TrainConfig& c) { return hex64(fnv1a64(json(c).dump())); }

std::string dataset_hash(const fs::path& csv) { return hex64(fnv1a64(read_file(csv))); }

void write_manifest(const fs::path& path, const std::string& command, json config, const json& seeds,
                    const std::string& data_hash, const std::vector<std::string>& artifacts, double seconds,
                    const std::string& started) {
  json m = {{"command", command},
            {"config", std::move(config)},
            {"seeds", seeds},
            {"dataset_hash", data_hash},
            {"artifacts", artifacts},
            {"timings", {{"started_at", started}, {"wall_seconds", seconds}}}};
  write_file(path, m.dump(2) + "\n");
}

std::vector<EvalDirection> parse_directions(const std::string& s) {
  if (s == "both") return {EvalDirection::VisToIr, EvalDirection::IrToVis};
  if (s == "vis2ir") return {EvalDirection::VisToIr};
  if (s == "ir2vis") return {EvalDirection::IrToVis};
  throw ConfigError("unknown direction '" + s + "' (valid: vis2ir|ir2vis|both)");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string cmc_csv(const std::vector<MetricsReport>& reports) {
  std::string out = "direction,rank,cmc\n";
  for (const auto& r : reports)
    for (std::size_t k = 0; k < r.cmc.size(); ++k)
      out += std::string(to_string(r.direction)) + "," + std::to_string(k + 1) + "," + format_double(r.cmc[k]) + "\n";
  return out;
}

json metrics_document(const ModelState& model, const Dataset& data, const std::vector<EvalDirection>& dirs,
                      const std::string& variant, const std::string& cfg_hash, int threads,
                      std::vector<MetricsReport>* reports = nullptr) {
  const CorrespondenceSet corr = build_correspondences(model, data);
  json results = json::array();
  for (EvalDirection d : dirs) {
    MetricsReport r = evaluate(model, data, d, &corr, threads);
    results.push_back(metrics_json(r));
    if (reports) reports->push_back(std::move(r));
  }
  return {{"variant", variant}, {"config_hash", cfg_hash}, {"results", results}};
}

struct SynthFlags {
  std::optional<int> ids;
  std::optional<int> per_id;
  std::optional<double> gap;
  std::optional<double> noise;
  std::optional<double> jitter;
  std::optional<int> ir_drop;
  std::optional<std::uint64_t> seed;

  void add_to(CLI::App* app) {
    app->add_option("--ids", ids, "Number of identities per modality");
    app->add_option("--per-id", per_id, "Samples per identity per modality");
    app->add_option("--gap", gap, "Modality gap (offset norm)");
    app->add_option("--noise", noise, "Per-sample noise sigma");
    app->add_option("--jitter", jitter, "Per-modality transform perturbation scale");
    app->add_option("--ir-drop", ir_drop, "Latent dimensions dropped before the infrared map");
  }

  void apply(SynthConfig& c) const {
    if (ids) c.num_identities = *ids;
    if (per_id) c.samples_per_id_per_modality = *per_id;
    if (gap) c.modality_gap = *gap;
    if (noise) c.noise_sigma = *noise;
    if (jitter) c.transform_jitter = *jitter;
    if (ir_drop) c.ir_dropped_latent_dims = *ir_drop;
    if (seed) c.sample_seed = *seed;
  }
};

struct TrainFlags {
  bool desk_scale = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> phase1_epochs;
  std::optional<int> phase2_epochs;
  std::optional<int> min_count;

  void add_to(CLI::App* app) {
    app->add_flag("--desk-scale", desk_scale, "Use the scaled-down schedule");
    app->add_option("--seed", seed, "Training seed");
    app->add_option("--phase1-epochs", phase1_epochs, "Override phase-1 epochs");
    app->add_option("--phase2-epochs", phase2_epochs, "Override phase-2 epochs");
    app->add_option("--min-count", min_count, "Minimum vote count for a selected correspondence");
  }

  TrainConfig resolve(const json& file) const {
    TrainConfig c = block_or(file, "train", desk_scale ? TrainConfig::desk_scale() : TrainConfig{});
    if (seed) c.seed = *seed;
    if (phase1_epochs) c.phase1_epochs = *phase1_epochs;
    if (phase2_epochs) c.phase2_epochs = *phase2_epochs;
    if (min_count) c.min_count = *min_count;
    c.validate();
    return c;
  }
};

int cmd_gen_data(const std::string& out, const std::string& config_path, const SynthFlags& flags) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const json file = load_config_file(config_path);
  SynthConfig sc = block_or(file, "synth", SynthConfig{});
  flags.apply(sc);
  sc.validate();
  const Dataset d = generate_synthetic(sc);
  save_dataset(d, out);
  const std::string manifest = out + ".manifest.json";
  write_manifest(manifest, "gen-data", {{"synth", sc}}, {{"sample_seed", sc.sample_seed},
                                                          {"transform_seed", sc.transform_seed},
                                                          {"id_permutation_seed", sc.id_permutation_seed}},
                 dataset_hash(out), {out, sidecar_path(out).string(), manifest}, seconds_since(t0), started);
  std::cout << "wrote " << d.samples.size() << " samples to " << out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string variant = "full";
  std::string history;
  std::string dump_cre;
  std::string metrics;
  std::string config;
  int threads = 0;
};

int cmd_train(const TrainArgs& a, const TrainFlags& flags) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const Variant variant = parse_variant(a.variant);
  const TrainConfig cfg = flags.resolve(load_config_file(a.config));
  const int threads = resolve_threads(a.threads);
  const Dataset data = load_dataset(a.data);
  const std::string hash = config_hash(cfg);

  const std::string history_path = a.history.empty() ? a.out + ".history.jsonl" : a.history;
  std::ostringstream history;
  std::vector<std::string> artifacts;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) { history << to_json(r).dump() << "\n"; };
  if (!a.dump_cre.empty()) {
    fs::create_directories(a.dump_cre);
    hooks.on_refresh = [&](const CorrespondenceSet& s, int epoch) {
      std::ostringstream name;
      name << "cre_epoch_" << std::setw(4) << std::setfill('0') << epoch << ".json";
      const fs::path p = fs::path(a.dump_cre) / name.str();
      write_file(p, correspondence_json(s, epoch).dump() + "\n");
      artifacts.push_back(p.string());
    };
  }
  const TrainResult result = train(data, cfg, variant, hooks);

  Checkpoint ck;
  ck.model = result.model;
  ck.prototypes = result.prototypes;
  ck.metadata = {{"config", json(cfg).dump()}, {"config_hash", hash}, {"variant", to_string(variant)}};
  save_checkpoint(ck, a.out);
  write_file(history_path, history.str());
  artifacts.insert(artifacts.begin(), {a.out, history_path});

  if (data.ground_truth_alignment) {
    const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.json" : a.metrics;
    const json doc = metrics_document(result.model, data, parse_directions("both"), to_string(variant), hash, threads);
    write_file(metrics_path, doc.dump(2) + "\n");
    artifacts.push_back(metrics_path);
  }
  const std::string manifest = a.out + ".manifest.json";
  artifacts.push_back(manifest);
  write_manifest(manifest, "train", {{"train", cfg}, {"variant", to_string(variant)}, {"config_hash", hash}},
                 {{"train_seed", cfg.seed}}, dataset_hash(a.data), artifacts, seconds_since(t0), started);
  std::cout << "trained variant " << to_string(variant) << " -> " << a.out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string direction = "both";
  std::string out;
  std::string cmc_csv;
  int threads = 0;
};

int cmd_eval(const EvalArgs& a) {
  const auto dirs = parse_directions(a.direction);
  const int threads = resolve_threads(a.threads);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Dataset data = load_dataset(a.data);
  if (ck.model.input_dim() != data.input_dim())
    throw DimensionError("checkpoint expects " + std::to_string(ck.model.input_dim()) + " input features, dataset has " +
                         std::to_string(data.input_dim()));
  if (ck.model.expert_vis.num_classes() != data.num_ids_vis || ck.model.expert_ir.num_classes() != data.num_ids_ir)
    throw DimensionError("checkpoint identity counts do not match the dataset");
  auto meta = [&](const char* k) {
    auto it = ck.metadata.find(k);
    return it == ck.metadata.end() ? std::string() : it->second;
  };
  std::vector<MetricsReport> reports;
  const json doc = metrics_document(ck.model, data, dirs, meta("variant"), meta("config_hash"), threads, &reports);
  const std::string text = doc.dump(2) + "\n";
  if (a.out.empty()) std::cout << text;
  else write_file(a.out, text);
  if (!a.cmc_csv.empty()) write_file(a.cmc_csv, cmc_csv(reports));
  return kExitOk;
}

struct AblateArgs {
  std::string data;
  std::string out = "ablation";
  std::string variants = "b,b-cmcl-nocre,b-cre-cmcl,full";
  std::string seeds = "1,2,3,4,5";
  std::string direction = "both";
  std::string config;
  int threads = 0;
};

int cmd_ablate(const AblateArgs& a, const TrainFlags& tflags, const SynthFlags& sflags) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const json file = load_config_file(a.config);
  const TrainConfig cfg = tflags.resolve(file);
  SynthConfig sc = block_or(file, "synth", SynthConfig{});
  sflags.apply(sc);
  sc.validate();
  const auto dirs = parse_directions(a.direction);
  const int threads = resolve_threads(a.threads);

  std::vector<Variant> variants;
  for (const auto& v : split_list(a.variants)) variants.push_back(parse_variant(v));
  if (variants.empty()) throw ConfigError("--variants is empty");
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(a.seeds)) {
    long long v = 0;
    if (!parse_int(s, v) || v < 0) throw ConfigError("bad seed '" + s + "'");
    seeds.push_back(static_cast<std::uint64_t>(v));
  }
  if (seeds.empty()) throw ConfigError("--seeds is empty");

  std::optional<Dataset> fixed;
  if (!a.data.empty()) fixed = load_dataset(a.data);
  auto data_for = [&](std::uint64_t seed) { return fixed ? *fixed : generate_synthetic(seeded(sc, seed)); };
  const auto runs = run_ablation(data_for, cfg, variants, seeds, threads);
  const auto rows = summarize(runs, variants, dirs);

  json doc = ablation_json(rows, runs);
  doc["config_hash"] = config_hash(cfg);
  const std::string csv_path = a.out + ".csv";
  const std::string json_path = a.out + ".json";
  write_file(csv_path, ablation_csv(rows));
  write_file(json_path, doc.dump(2) + "\n");
  std::cout << ablation_csv(rows);

  json config = {{"train", cfg}, {"variants", a.variants}, {"direction", a.direction}};
  if (!fixed) config["synth"] = sc;
  const std::string manifest = a.out + ".manifest.json";
  write_manifest(manifest, "ablate", config, seeds, fixed ? dataset_hash(a.data) : std::string(),
                 {csv_path, json_path, manifest}, seconds_since(t0), started);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal identity matching with heterogeneous experts"};
  app.require_subcommand(1);

  std::string gen_out;
  std::string gen_config;
  SynthFlags gen_flags;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic two-modality dataset");
  gen->add_option("--out", gen_out, "Output CSV path")->required();
  gen->add_option("--config", gen_config, "JSON config file");
  gen_flags.add_to(gen);
  gen->add_option("--seed", gen_flags.seed, "Sample seed");

  TrainArgs targs;
  TrainFlags tflags;
  auto* tr = app.add_subcommand("train", "Train one variant");
  tr->add_option("--data", targs.data, "Dataset CSV")->required();
  tr->add_option("--out", targs.out, "Checkpoint path")->required();
  tr->add_option("--variant", targs.variant, "b|b-cmcl-nocre|b-cre-cmcl|full|mrv-only|mvr-only");
  tr->add_option("--history", targs.history, "JSON-lines history path (default <out>.history.jsonl)");
  tr->add_option("--dump-cre", targs.dump_cre, "Directory for per-refresh correspondence dumps");
  tr->add_option("--metrics", targs.metrics, "Metrics JSON path (default <out>.metrics.json)");
  tr->add_option("--config", targs.config, "JSON config file");
  tr->add_option("--threads", targs.threads, "Worker threads (fallback: XMATCH_THREADS)");
  tflags.add_to(tr);

  EvalArgs eargs;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset with known alignment");
  ev->add_option("--checkpoint", eargs.checkpoint, "Checkpoint path")->required();
  ev->add_option("--data", eargs.data, "Dataset CSV")->required();
  ev->add_option("--direction", eargs.direction, "vis2ir|ir2vis|both");
  ev->add_option("--out", eargs.out, "Metrics JSON path (default stdout)");
  ev->add_option("--cmc-csv", eargs.cmc_csv, "Write the full CMC curve as CSV");
  ev->add_option("--threads", eargs.threads, "Worker threads (fallback: XMATCH_THREADS)");

  AblateArgs aargs;
  TrainFlags aflags;
  SynthFlags asflags;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate several variants over several seeds");
  ab->add_option("--data", aargs.data, "Fixed dataset CSV (default: synthetic data per seed)");
  ab->add_option("--out", aargs.out, "Output prefix for .csv/.json/.manifest.json");
  ab->add_option("--variants", aargs.variants, "Comma-separated variants");
  ab->add_option("--seeds", aargs.seeds, "Comma-separated seeds");
  ab->add_option("--direction", aargs.direction, "vis2ir|ir2vis|both");
  ab->add_option("--config", aargs.config, "JSON config file");
  ab->add_option("--threads", aargs.threads, "Worker threads (fallback: XMATCH_THREADS)");
  aflags.add_to(ab);
  asflags.add_to(ab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, gen_config, gen_flags);
    if (*tr) return cmd_train(targs, tflags);
    if (*ev) return cmd_eval(eargs);
    if (*ab) return cmd_ablate(aargs, aflags, asflags);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const EvaluationError& e) {
    std::cerr << "evaluation error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConsistencyError& e) {
    std::cerr << "consistency error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ChecksumError& e) {
    std::cerr << "checksum error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitUsage;
}
