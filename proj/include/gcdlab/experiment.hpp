#pragma once

#include <filesystem>

#include "gcdlab/cluster.hpp"
#include "gcdlab/common.hpp"
#include "gcdlab/encoder.hpp"
#include "gcdlab/eval.hpp"
#include "gcdlab/ita.hpp"
#include "gcdlab/rdl.hpp"
#include "gcdlab/sam.hpp"
#include "gcdlab/synthdata.hpp"

namespace gcdlab {

struct ReliabilityArm {
  enum class Kind { rdl, global_r };
  Kind kind = Kind::rdl;
  double r_pct = 50.0;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  TrainGcdConfig gcd;
  DownstreamConfig downstream;
  ReliabilityArm reliability;
  double corrupt_fraction = 0.0;  // fraction of each pseudo-class flipped, lowest stability first
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out_dir = "runs/exp";
  bool write_dataset = false;
  bool write_checkpoints = false;

  void validate() const {
    dataset.validate();
    gcd.validate();
    downstream.validate();
    if (corrupt_fraction < 0.0 || corrupt_fraction > 1.0) {
      throw std::invalid_argument("ExperimentConfig: corrupt_fraction outside [0,1]");
    }
    if (seeds.empty()) throw std::invalid_argument("ExperimentConfig: need at least one seed");
  }
};

// --- arm string encoding ----------------------------------------------------

inline std::string temp_arm_to_string(const TempArm& arm) {
  switch (arm.kind) {
    case TempArm::Kind::ita:
      return "ita";
    case TempArm::Kind::fixed_tau: {
      nlohmann::json v = arm.fixed_value;
      return "fixed_tau:" + v.dump();
    }
    case TempArm::Kind::ts_schedule:
      return "ts_schedule";
  }
  throw std::logic_error("temp_arm_to_string: bad kind");
}

inline TempArm temp_arm_from_string(const std::string& s) {
  TempArm arm;
  if (s == "ita") {
    arm.kind = TempArm::Kind::ita;
  } else if (s == "ts_schedule") {
    arm.kind = TempArm::Kind::ts_schedule;
  } else if (s.rfind("fixed_tau:", 0) == 0) {
    arm.kind = TempArm::Kind::fixed_tau;
    arm.fixed_value = std::stod(s.substr(10));
  } else {
    throw std::invalid_argument("unknown temperature arm: " + s);
  }
  return arm;
}

inline std::string reliability_arm_to_string(const ReliabilityArm& arm) {
  if (arm.kind == ReliabilityArm::Kind::rdl) return "rdl";
  nlohmann::json v = arm.r_pct;
  return "global_r:" + v.dump();
}

inline ReliabilityArm reliability_arm_from_string(const std::string& s) {
  ReliabilityArm arm;
  if (s == "rdl") {
    arm.kind = ReliabilityArm::Kind::rdl;
  } else if (s.rfind("global_r:", 0) == 0) {
    arm.kind = ReliabilityArm::Kind::global_r;
    arm.r_pct = std::stod(s.substr(9));
  } else {
    throw std::invalid_argument("unknown reliability arm: " + s);
  }
  return arm;
}

// --- config (de)serialization -------------------------------------------------

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["dataset"] = {{"num_classes", c.dataset.num_classes},
                  {"num_known", c.dataset.num_known},
                  {"ambient_dim", c.dataset.ambient_dim},
                  {"zipf_exponent", c.dataset.zipf_exponent},
                  {"instances_total", c.dataset.instances_total},
                  {"view_noise_sigma", c.dataset.view_noise_sigma},
                  {"intra_class_sigma", c.dataset.intra_class_sigma},
                  {"labeled_fraction_known", c.dataset.labeled_fraction_known},
                  {"seed", c.dataset.seed}};
  j["encoder"] = {{"hidden_dim", c.gcd.hidden_dim},
                  {"embed_dim", c.gcd.embed_dim},
                  {"momentum", c.gcd.encoder_momentum},
                  {"queue_capacity", c.gcd.queue_capacity}};
  j["ita"] = {{"rho", c.gcd.ita.rho},
              {"top_percent", c.gcd.ita.top_percent},
              {"tau_min", c.gcd.ita.tau_min},
              {"tau_max", c.gcd.ita.tau_max},
              {"clamp_low_pct", c.gcd.ita.clamp_low_pct},
              {"clamp_high_pct", c.gcd.ita.clamp_high_pct}};
  j["train"] = {{"lambda", c.gcd.lambda},
                {"cluster_temperature", c.gcd.cluster_temperature},
                {"epochs", c.gcd.epochs},
                {"batch_size", c.gcd.batch_size},
                {"learning_rate", c.gcd.learning_rate},
                {"t_bar", c.gcd.t_bar}};
  j["downstream"] = {{"epochs", c.downstream.epochs},
                     {"learning_rate", c.downstream.learning_rate},
                     {"batch_size", c.downstream.batch_size}};
  j["arms"] = {{"temperature", temp_arm_to_string(c.gcd.arm)},
               {"reliability", reliability_arm_to_string(c.reliability)}};
  j["corrupt_fraction"] = c.corrupt_fraction;
  j["seeds"] = c.seeds;
  j["out_dir"] = c.out_dir;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  const auto& d = j.at("dataset");
  c.dataset.num_classes = d.at("num_classes").get<int>();
  c.dataset.num_known = d.at("num_known").get<int>();
  c.dataset.ambient_dim = d.at("ambient_dim").get<int>();
  c.dataset.zipf_exponent = d.at("zipf_exponent").get<double>();
  c.dataset.instances_total = d.at("instances_total").get<int>();
  c.dataset.view_noise_sigma = d.at("view_noise_sigma").get<double>();
  c.dataset.intra_class_sigma = d.at("intra_class_sigma").get<double>();
  c.dataset.labeled_fraction_known = d.at("labeled_fraction_known").get<double>();
  c.dataset.seed = d.at("seed").get<uint64_t>();
  const auto& e = j.at("encoder");
  c.gcd.hidden_dim = e.at("hidden_dim").get<int>();
  c.gcd.embed_dim = e.at("embed_dim").get<int>();
  c.gcd.encoder_momentum = e.at("momentum").get<double>();
  c.gcd.queue_capacity = e.at("queue_capacity").get<int>();
  const auto& ita = j.at("ita");
  c.gcd.ita.rho = ita.at("rho").get<double>();
  c.gcd.ita.top_percent = ita.at("top_percent").get<double>();
  c.gcd.ita.tau_min = ita.at("tau_min").get<double>();
  c.gcd.ita.tau_max = ita.at("tau_max").get<double>();
  c.gcd.ita.clamp_low_pct = ita.at("clamp_low_pct").get<double>();
  c.gcd.ita.clamp_high_pct = ita.at("clamp_high_pct").get<double>();
  const auto& t = j.at("train");
  c.gcd.lambda = t.at("lambda").get<double>();
  c.gcd.cluster_temperature = t.at("cluster_temperature").get<double>();
  c.gcd.epochs = t.at("epochs").get<int>();
  c.gcd.batch_size = t.at("batch_size").get<int>();
  c.gcd.learning_rate = t.at("learning_rate").get<double>();
  c.gcd.t_bar = t.at("t_bar").get<int>();
  c.gcd.num_classes = c.dataset.num_classes;
  const auto& ds = j.at("downstream");
  c.downstream.epochs = ds.at("epochs").get<int>();
  c.downstream.learning_rate = ds.at("learning_rate").get<double>();
  c.downstream.batch_size = ds.at("batch_size").get<int>();
  c.gcd.arm = temp_arm_from_string(j.at("arms").at("temperature").get<std::string>());
  c.reliability = reliability_arm_from_string(j.at("arms").at("reliability").get<std::string>());
  c.corrupt_fraction = j.at("corrupt_fraction").get<double>();
  c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  c.out_dir = j.at("out_dir").get<std::string>();
  return c;
}

inline bool config_equal(const ExperimentConfig& a, const ExperimentConfig& b) {
  return config_to_json(a) == config_to_json(b);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_config: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return config_from_json(j);
}

// --- corruption protocol ------------------------------------------------------

// Flips the pseudo-label of the lowest-stability `fraction` of every
// pseudo-class to a different random class. Models the wrong-label regime the
// reliability schedule is supposed to absorb.
inline void corrupt_pseudo_labels(std::vector<ReliabilityEntry>& table, double fraction, int num_classes,
                                  uint64_t seed) {
  if (fraction <= 0.0) return;
  auto rng = make_rng(seed, "corrupt");
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < table.size(); ++i) by_class[table[i].pseudo_class].push_back(i);
  std::uniform_int_distribution<int> pick(0, num_classes - 2);
  for (auto& [cls, idx] : by_class) {
    std::sort(idx.begin(), idx.end(), [&table](size_t a, size_t b) {
      if (table[a].stability != table[b].stability) return table[a].stability < table[b].stability;
      return table[a].id < table[b].id;
    });
    auto n_corrupt = static_cast<size_t>(
        std::floor(fraction * static_cast<double>(idx.size()) + 0.5));
    for (size_t k = 0; k < n_corrupt && k < idx.size(); ++k) {
      int target = pick(rng);
      if (target >= cls) ++target;  // any class but the current one
      table[idx[k]].pseudo_class = target;
    }
  }
}

// --- principal component projections ------------------------------------------

// Top-2 principal components of the final embeddings, sign-fixed so the
// largest-magnitude coefficient of each axis is positive.
inline Mat pca_project_2d(const Mat& rows) {
  if (rows.rows() < 2 || rows.cols() < 2) throw std::invalid_argument("pca_project_2d: need >= 2x2 data");
  Mat centered = rows.rowwise() - rows.colwise().mean();
  Mat cov = centered.transpose() * centered / static_cast<double>(rows.rows());
  Eigen::SelfAdjointEigenSolver<Mat> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca_project_2d: eigen decomposition failed");
  Mat axes(rows.cols(), 2);
  axes.col(0) = solver.eigenvectors().col(rows.cols() - 1);
  axes.col(1) = solver.eigenvectors().col(rows.cols() - 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::Index arg = 0;
    axes.col(k).cwiseAbs().maxCoeff(&arg);
    if (axes(arg, k) < 0.0) axes.col(k) = -axes.col(k);
  }
  return centered * axes;
}

// --- per-seed pipeline ----------------------------------------------------------

struct SeedResult {
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsReport gcd_metrics;         // pseudo-labels vs truth, unlabeled instances
  MetricsReport downstream_metrics;  // classifier predictions vs truth, all instances
  GcdResult gcd;
  std::vector<ReliabilityEntry> table;
  DownstreamResult downstream;
};

inline std::set<int> known_class_set(const DatasetSpec& spec) {
  std::set<int> known;
  for (int c = 0; c < spec.num_known; ++c) known.insert(c);
  return known;
}

inline MetricsReport score_pseudo_labels(const std::vector<InstanceRecord>& records,
                                         const std::vector<PseudoLabel>& pseudo,
                                         const DatasetSpec& spec) {
  std::map<int, int> truth_by_id;
  for (const auto& r : records) truth_by_id[r.id] = r.true_class;
  std::vector<int> y_pred, y_true;
  for (const auto& pl : pseudo) {
    y_pred.push_back(pl.pseudo_class);
    y_true.push_back(truth_by_id.at(pl.id));
  }
  return match_and_score(y_pred, y_true, known_class_set(spec), spec.num_classes);
}

inline MetricsReport score_predictions(const std::vector<InstanceRecord>& records,
                                       const std::map<int, int>& predictions, const DatasetSpec& spec) {
  std::vector<int> y_pred, y_true;
  for (const auto& r : records) {
    y_pred.push_back(predictions.at(r.id));
    y_true.push_back(r.true_class);
  }
  return match_and_score(y_pred, y_true, known_class_set(spec), spec.num_classes);
}

// generate -> train_gcd -> stability/buckets -> train_downstream -> score.
inline SeedResult run_seed(const ExperimentConfig& cfg, uint64_t seed) {
  SeedResult res;
  res.seed = seed;
  DatasetSpec spec = cfg.dataset;
  spec.seed = seed;
  auto records = generate(spec);

  TrainGcdConfig gcd_cfg = cfg.gcd;
  gcd_cfg.num_classes = spec.num_classes;
  res.gcd = train_gcd(records, gcd_cfg, seed);
  res.gcd_metrics = score_pseudo_labels(records, res.gcd.pseudo_labels, spec);

  res.table = build_reliability_table(records, res.gcd.checkpoints, res.gcd.pseudo_labels);
  corrupt_pseudo_labels(res.table, cfg.corrupt_fraction, spec.num_classes, seed);
  rank_buckets(res.table, cfg.downstream.epochs);

  DownstreamConfig ds_cfg = cfg.downstream;
  if (cfg.reliability.kind == ReliabilityArm::Kind::rdl) {
    ds_cfg.mode = WeightMode::rdl;
  } else {
    ds_cfg.mode = WeightMode::global_r;
    ds_cfg.global_r_pct = cfg.reliability.r_pct;
  }
  res.downstream = train_downstream(records, res.table, ds_cfg, spec.num_classes, seed);
  res.downstream_metrics = score_predictions(records, res.downstream.predictions, spec);
  res.ok = true;
  return res;
}

// --- output writing --------------------------------------------------------------

inline void write_pseudo_labels_csv(const std::vector<PseudoLabel>& pseudo, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_pseudo_labels_csv: cannot open " + path);
  out << "id,pseudo_class,max_q\n";
  out.precision(17);
  for (const auto& pl : pseudo) out << pl.id << "," << pl.pseudo_class << "," << pl.max_q << "\n";
}

inline std::vector<PseudoLabel> read_pseudo_labels_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_pseudo_labels_csv: cannot open " + path);
  std::vector<PseudoLabel> out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    PseudoLabel pl;
    if (std::sscanf(line.c_str(), "%d,%d,%lf", &pl.id, &pl.pseudo_class, &pl.max_q) != 3) {
      throw std::runtime_error("read_pseudo_labels_csv: malformed line: " + line);
    }
    out.push_back(pl);
  }
  return out;
}

inline void write_projections_csv(const std::vector<InstanceRecord>& records, const EncoderParams& encoder,
                                  const std::string& path) {
  Mat rows(static_cast<Eigen::Index>(records.size()), encoder.embed_dim());
  for (size_t i = 0; i < records.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = forward(encoder, records[i].base_feature).transpose();
  }
  Mat proj = pca_project_2d(rows);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_projections_csv: cannot open " + path);
  out << "id,true_class,pc1,pc2\n";
  out.precision(17);
  for (size_t i = 0; i < records.size(); ++i) {
    out << records[i].id << "," << records[i].true_class << "," << proj(static_cast<Eigen::Index>(i), 0)
        << "," << proj(static_cast<Eigen::Index>(i), 1) << "\n";
  }
}

inline nlohmann::json seed_metrics_json(const SeedResult& res) {
  nlohmann::json j;
  j["seed"] = res.seed;
  j["ok"] = res.ok;
  if (!res.ok) {
    j["error"] = res.error;
    return j;
  }
  j["gcd"] = metrics_to_json(res.gcd_metrics);
  j["downstream"] = metrics_to_json(res.downstream_metrics);
  j["epoch_losses"] = res.gcd.epoch_losses;
  return j;
}

inline nlohmann::json aggregate_json(const std::vector<SeedResult>& results) {
  auto stats_of = [](std::vector<double> values) {
    nlohmann::json j;
    j["median"] = median(values);
    j["iqr_low"] = percentile(values, 25.0);
    j["iqr_high"] = percentile(values, 75.0);
    return j;
  };
  nlohmann::json j;
  nlohmann::json seeds = nlohmann::json::array();
  std::vector<double> gcd_all, gcd_known, gcd_novel, ds_all, ds_known, ds_novel;
  int failures = 0;
  for (const auto& r : results) {
    seeds.push_back(r.seed);
    if (!r.ok) {
      ++failures;
      continue;
    }
    gcd_all.push_back(r.gcd_metrics.acc_all);
    gcd_known.push_back(r.gcd_metrics.acc_known);
    gcd_novel.push_back(r.gcd_metrics.acc_novel);
    ds_all.push_back(r.downstream_metrics.acc_all);
    ds_known.push_back(r.downstream_metrics.acc_known);
    ds_novel.push_back(r.downstream_metrics.acc_novel);
  }
  j["seeds"] = std::move(seeds);
  j["failures"] = failures;
  if (!gcd_all.empty()) {
    j["gcd"] = {{"acc_all", stats_of(gcd_all)},
                {"acc_known", stats_of(gcd_known)},
                {"acc_novel", stats_of(gcd_novel)}};
    j["downstream"] = {{"acc_all", stats_of(ds_all)},
                       {"acc_known", stats_of(ds_known)},
                       {"acc_novel", stats_of(ds_novel)}};
  }
  return j;
}

// Runs every seed, writing per-seed artifacts and the aggregate summary. A
// failing seed is recorded and does not abort the others.
inline std::vector<SeedResult> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  std::vector<SeedResult> results;
  for (uint64_t seed : cfg.seeds) {
    SeedResult res;
    try {
      res = run_seed(cfg, seed);
    } catch (const std::exception& ex) {
      res.seed = seed;
      res.ok = false;
      res.error = ex.what();
    }
    fs::path dir = fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    if (res.ok) {
      if (cfg.write_dataset) {
        DatasetSpec spec = cfg.dataset;
        spec.seed = seed;
        write_jsonl(generate(spec), (dir / "dataset.jsonl").string());
      }
      if (cfg.write_checkpoints) {
        for (const auto& ck : res.gcd.checkpoints) {
          save_checkpoint(ck, (dir / ("gcd_ckpt_" + std::to_string(ck.epoch) + ".json")).string());
        }
      }
      write_pseudo_labels_csv(res.gcd.pseudo_labels, (dir / "pseudo_labels.csv").string());
      write_reliability_csv(res.table, (dir / "reliability.csv").string());
      {
        std::ofstream out(dir / "kappa_hist.json");
        out << kappa_histogram_json(res.downstream.epochs).dump(2) << "\n";
      }
      {
        DatasetSpec spec = cfg.dataset;
        spec.seed = seed;
        auto records = generate(spec);
        write_projections_csv(records, res.gcd.encoder, (dir / "projections.csv").string());
      }
    }
    {
      std::ofstream out(dir / "metrics.json");
      out << seed_metrics_json(res).dump(2) << "\n";
    }
    results.push_back(std::move(res));
  }
  std::ofstream out(fs::path(cfg.out_dir) / "aggregate.json");
  out << aggregate_json(results).dump(2) << "\n";
  return results;
}

}  // namespace gcdlab
