// Experiment runner for the synthetic long-tailed class discovery lab.
//
// Subcommands: generate, train-gcd, reliability, train-downstream, evaluate,
// run-all, sam-demo. All knobs come from a single JSON config (--config);
// --seed overrides the config seeds. Failures exit nonzero with an error JSON
// on stdout.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "gcdlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace gcdlab;

namespace {

ExperimentConfig load_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return load_config(path);
}

std::vector<InstanceRecord> dataset_for(const ExperimentConfig& cfg, const std::string& dataset_in,
                                        uint64_t seed) {
  if (!dataset_in.empty()) return read_jsonl(dataset_in);
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  return generate(spec);
}

int cmd_generate(const ExperimentConfig& cfg, uint64_t seed, const std::string& dataset_out) {
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  auto records = generate(spec);
  write_jsonl(records, dataset_out);
  auto hist = class_histogram(records);
  nlohmann::json j;
  j["instances"] = records.size();
  j["classes"] = hist.size();
  j["dataset_out"] = dataset_out;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_train_gcd(const ExperimentConfig& cfg, uint64_t seed, const std::string& dataset_in,
                  const std::string& out_dir, bool dump_head_temp) {
  auto records = dataset_for(cfg, dataset_in, seed);
  fs::create_directories(out_dir);
  TrainGcdConfig gcd_cfg = cfg.gcd;
  gcd_cfg.num_classes = cfg.dataset.num_classes;
  EpochTauSink sink;
  if (dump_head_temp) {
    sink = [&out_dir](int epoch, const std::map<int, double>& h, const std::map<int, double>& taus) {
      std::ofstream out(fs::path(out_dir) / ("head_temp_epoch" + std::to_string(epoch) + ".csv"));
      out << "id,headness,tau\n";
      out.precision(17);
      for (const auto& [id, hv] : h) out << id << "," << hv << "," << taus.at(id) << "\n";
    };
  }
  auto result = train_gcd(records, gcd_cfg, seed, sink);
  for (const auto& ck : result.checkpoints) {
    save_checkpoint(ck, (fs::path(out_dir) / ("gcd_ckpt_" + std::to_string(ck.epoch) + ".json")).string());
  }
  write_pseudo_labels_csv(result.pseudo_labels, (fs::path(out_dir) / "pseudo_labels.csv").string());
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  auto metrics = score_pseudo_labels(records, result.pseudo_labels, spec);
  std::ofstream mout(fs::path(out_dir) / "gcd_metrics.json");
  mout << metrics_to_json(metrics).dump(2) << "\n";
  std::cout << metrics_to_json(metrics).dump(2) << "\n";
  return 0;
}

int cmd_reliability(const ExperimentConfig& cfg, uint64_t seed, const std::string& dataset_in,
                    const std::string& gcd_dir, const std::string& out_dir) {
  auto records = dataset_for(cfg, dataset_in, seed);
  std::vector<GcdCheckpoint> checkpoints;
  for (const auto& entry : fs::directory_iterator(gcd_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("gcd_ckpt_", 0) == 0 && entry.path().extension() == ".json") {
      checkpoints.push_back(load_checkpoint(entry.path().string()));
    }
  }
  std::sort(checkpoints.begin(), checkpoints.end(),
            [](const GcdCheckpoint& a, const GcdCheckpoint& b) { return a.epoch < b.epoch; });
  if (checkpoints.size() < 2) throw std::runtime_error("reliability: need >= 2 checkpoints in " + gcd_dir);
  auto pseudo = read_pseudo_labels_csv((fs::path(gcd_dir) / "pseudo_labels.csv").string());
  auto table = build_reliability_table(records, checkpoints, pseudo);
  corrupt_pseudo_labels(table, cfg.corrupt_fraction, cfg.dataset.num_classes, seed);
  rank_buckets(table, cfg.downstream.epochs);
  fs::create_directories(out_dir);
  write_reliability_csv(table, (fs::path(out_dir) / "reliability.csv").string());
  nlohmann::json j;
  j["entries"] = table.size();
  j["reliability_csv"] = (fs::path(out_dir) / "reliability.csv").string();
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_train_downstream(const ExperimentConfig& cfg, uint64_t seed, const std::string& dataset_in,
                         const std::string& reliability_csv, const std::string& out_dir) {
  auto records = dataset_for(cfg, dataset_in, seed);
  auto table = read_reliability_csv(reliability_csv);
  DownstreamConfig ds_cfg = cfg.downstream;
  if (cfg.reliability.kind == ReliabilityArm::Kind::rdl) {
    ds_cfg.mode = WeightMode::rdl;
  } else {
    ds_cfg.mode = WeightMode::global_r;
    ds_cfg.global_r_pct = cfg.reliability.r_pct;
  }
  auto result = train_downstream(records, table, ds_cfg, cfg.dataset.num_classes, seed);
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "predictions.csv");
    out << "id,predicted_class\n";
    for (const auto& [id, cls] : result.predictions) out << id << "," << cls << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "kappa_hist.json");
    out << kappa_histogram_json(result.epochs).dump(2) << "\n";
  }
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  auto metrics = score_predictions(records, result.predictions, spec);
  std::ofstream mout(fs::path(out_dir) / "downstream_metrics.json");
  mout << metrics_to_json(metrics).dump(2) << "\n";
  std::cout << metrics_to_json(metrics).dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, uint64_t seed, const std::string& dataset_in,
                 const std::string& predictions_csv, const std::string& out_dir) {
  auto records = dataset_for(cfg, dataset_in, seed);
  std::map<int, int> predictions;
  {
    std::ifstream in(predictions_csv);
    if (!in) throw std::runtime_error("evaluate: cannot open " + predictions_csv);
    std::string line;
    std::getline(in, line);
    int id = 0, cls = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::sscanf(line.c_str(), "%d,%d", &id, &cls) != 2) {
        throw std::runtime_error("evaluate: malformed line: " + line);
      }
      predictions[id] = cls;
    }
  }
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  auto metrics = score_predictions(records, predictions, spec);
  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "metrics.json");
    out << metrics_to_json(metrics).dump(2) << "\n";
  }
  write_per_class_csv(metrics, (fs::path(out_dir) / "per_class.csv").string());
  std::cout << metrics_to_json(metrics).dump(2) << "\n";
  return 0;
}

int cmd_run_all(ExperimentConfig cfg) {
  auto results = run_experiment(cfg);
  std::cout << aggregate_json(results).dump(2) << "\n";
  for (const auto& r : results) {
    if (!r.ok) return 1;
  }
  return 0;
}

int cmd_sam_demo(uint64_t seed, int stage, const std::string& out_dir) {
  auto stage_cfg = stage_weight(stage);
  SamMicroConfig cfg;
  cfg.seed = seed;
  cfg.w = stage_cfg.w;
  // Stage pool sizes assume backbone-scale maps; the demo grid is scaled to
  // stay desk-sized while keeping the stage's relative receptive fields.
  if (stage <= 2) {
    cfg.height = cfg.width = stage_cfg.pool_sizes[0] + 2;
  }
  cfg.pool_sizes.assign(stage_cfg.pool_sizes.begin(), stage_cfg.pool_sizes.end());
  auto result = run_sam_micro(cfg);
  fs::create_directories(out_dir);
  for (size_t p = 0; p < result.final_s.size(); ++p) {
    write_pgm((fs::path(out_dir) / ("s_map_" + std::to_string(p) + ".pgm")).string(), result.final_s[p],
              cfg.height, cfg.width);
    Vec mask_values(cfg.height * cfg.width);
    for (int i = 0; i < cfg.height * cfg.width; ++i) {
      mask_values[i] = static_cast<double>(result.masks[p].values[static_cast<size_t>(i)]);
    }
    write_pgm((fs::path(out_dir) / ("mask_" + std::to_string(p) + ".pgm")).string(), mask_values,
              cfg.height, cfg.width);
  }
  nlohmann::json j;
  j["initial_loss"] = result.initial_loss;
  j["final_loss"] = result.final_loss;
  j["pairs"] = result.final_s.size();
  j["out_dir"] = out_dir;
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic long-tailed generalized class discovery lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::string dataset_in, dataset_out, out_dir = "runs/out";
  std::string gcd_dir, reliability_csv, predictions_csv;
  int64_t seed_override = -1;
  bool dump_head_temp = false;
  int stage = 3;

  app.add_option("--config", config_path, "Experiment config JSON");
  app.add_option("--seed", seed_override, "Seed override");

  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset");
  gen->add_option("--dataset-out", dataset_out, "Output JSONL path")->required();

  auto* tg = app.add_subcommand("train-gcd", "Train the class discovery model");
  tg->add_option("--dataset-in", dataset_in, "Dataset JSONL (generated on the fly when absent)");
  tg->add_option("--out-dir", out_dir, "Output directory");
  tg->add_flag("--dump-head-temp", dump_head_temp, "Write per-epoch (id, headness, tau) CSVs");

  auto* rel = app.add_subcommand("reliability", "Compute stability scores and buckets");
  rel->add_option("--dataset-in", dataset_in, "Dataset JSONL");
  rel->add_option("--gcd-dir", gcd_dir, "Directory with gcd checkpoints + pseudo labels")->required();
  rel->add_option("--out-dir", out_dir, "Output directory");

  auto* td = app.add_subcommand("train-downstream", "Train the downstream classifier");
  td->add_option("--dataset-in", dataset_in, "Dataset JSONL");
  td->add_option("--reliability", reliability_csv, "Reliability table CSV")->required();
  td->add_option("--out-dir", out_dir, "Output directory");

  auto* ev = app.add_subcommand("evaluate", "Hungarian-matched metrics for predictions");
  ev->add_option("--dataset-in", dataset_in, "Dataset JSONL");
  ev->add_option("--predictions", predictions_csv, "Predictions CSV")->required();
  ev->add_option("--out-dir", out_dir, "Output directory");

  auto* ra = app.add_subcommand("run-all", "Full pipeline over every configured seed");
  ra->add_option("--out-dir", out_dir, "Output directory override");

  auto* sd = app.add_subcommand("sam-demo", "Train the attention module on synthetic pairs");
  sd->add_option("--stage", stage, "Backbone stage in {1,2,3,4}");
  sd->add_option("--out-dir", out_dir, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = load_or_default(config_path);
    uint64_t seed = seed_override >= 0 ? static_cast<uint64_t>(seed_override)
                                       : (cfg.seeds.empty() ? 1 : cfg.seeds.front());
    if (gen->parsed()) return cmd_generate(cfg, seed, dataset_out);
    if (tg->parsed()) return cmd_train_gcd(cfg, seed, dataset_in, out_dir, dump_head_temp);
    if (rel->parsed()) return cmd_reliability(cfg, seed, dataset_in, gcd_dir, out_dir);
    if (td->parsed()) return cmd_train_downstream(cfg, seed, dataset_in, reliability_csv, out_dir);
    if (ev->parsed()) return cmd_evaluate(cfg, seed, dataset_in, predictions_csv, out_dir);
    if (ra->parsed()) {
      if (ra->count("--out-dir")) cfg.out_dir = out_dir;
      if (seed_override >= 0) cfg.seeds = {static_cast<uint64_t>(seed_override)};
      return cmd_run_all(cfg);
    }
    if (sd->parsed()) return cmd_sam_demo(seed, stage, out_dir);
  } catch (const std::exception& ex) {
    nlohmann::json err;
    err["error"] = {{"message", ex.what()}};
    std::cout << err.dump(2) << "\n";
    return 1;
  }
  return 0;
}
