#pragma once

#include <array>
#include <cstdio>

#include "gcdlab/cluster.hpp"
#include "gcdlab/common.hpp"
#include "gcdlab/synthdata.hpp"

namespace gcdlab {

inline constexpr double kKlClampEps = 1e-8;

inline double kl_divergence(const Vec& p, const Vec& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (int c = 0; c < p.size(); ++c) {
    if (p[c] <= 0.0) continue;
    kl += p[c] * (std::log(p[c]) - std::log(std::max(q[c], 1e-12)));
  }
  return kl;
}

// Sum of reciprocal divergences; each term is clamped away from the KL = 0
// singularity so identical distributions stay finite and ordered.
inline double stability_from_divergences(const std::vector<double>& divergences) {
  if (divergences.empty()) throw std::invalid_argument("stability: empty divergence list");
  double s = 0.0;
  for (double kl : divergences) s += 1.0 / std::max(kl, kKlClampEps);
  return s;
}

// s_i = sum over intermediate checkpoints of 1 / KL(q_final || q_t).
inline double stability(const Vec& q_final, const std::vector<Vec>& q_intermediates, int t_bar) {
  if (static_cast<int>(q_intermediates.size()) != t_bar - 1) {
    throw std::invalid_argument("stability: need exactly t_bar - 1 intermediate distributions");
  }
  std::vector<double> divergences;
  divergences.reserve(q_intermediates.size());
  for (const auto& q : q_intermediates) divergences.push_back(kl_divergence(q_final, q));
  return stability_from_divergences(divergences);
}

struct ReliabilityEntry {
  int id = 0;
  int pseudo_class = 0;
  double stability = 0.0;
  double rank_fraction = 0.0;  // fraction of same-class instances with strictly smaller s (ties by id)
  int bucket = 0;              // t-bar, in [0, T_is)
};

// Per-class independent ranking into T_is buckets: the least stable instance
// of each class lands in bucket 0, fractions resolve through integer
// arithmetic so the gamma/T_is <= r/n < (gamma+1)/T_is rule is exact.
inline void rank_buckets(std::vector<ReliabilityEntry>& table, int t_is) {
  if (t_is <= 0) throw std::invalid_argument("rank_buckets: t_is must be positive");
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < table.size(); ++i) by_class[table[i].pseudo_class].push_back(i);
  for (auto& [cls, idx] : by_class) {
    std::sort(idx.begin(), idx.end(), [&table](size_t a, size_t b) {
      if (table[a].stability != table[b].stability) return table[a].stability < table[b].stability;
      return table[a].id < table[b].id;
    });
    const auto n = static_cast<long>(idx.size());
    for (long r = 0; r < n; ++r) {
      auto& e = table[idx[static_cast<size_t>(r)]];
      e.rank_fraction = static_cast<double>(r) / static_cast<double>(n);
      e.bucket = static_cast<int>(r * t_is / n);
    }
  }
}

// kappa^t_i = sqrt(1 - max((t - t_bar_i)/T_is, 0)^2); full weight until the
// epoch passes the instance's bucket, zero once the gap reaches T_is.
inline double kappa(int t, int bucket, int t_is) {
  if (t_is <= 0) throw std::invalid_argument("kappa: t_is must be positive");
  double ratio = std::max(static_cast<double>(t - bucket) / static_cast<double>(t_is), 0.0);
  ratio = std::min(ratio, 1.0);
  return std::sqrt(1.0 - ratio * ratio);
}

// Probability of an instance under a saved model.
inline Vec checkpoint_probability(const GcdCheckpoint& ck, const Vec& base_feature) {
  return soft_assign(ck.head, forward(ck.encoder, base_feature));
}

// Builds the reliability table for every pseudo-labeled instance from the
// saved checkpoints: final model vs the intermediates.
inline std::vector<ReliabilityEntry> build_reliability_table(const std::vector<InstanceRecord>& records,
                                                             const std::vector<GcdCheckpoint>& checkpoints,
                                                             const std::vector<PseudoLabel>& pseudo) {
  if (checkpoints.size() < 2) {
    throw std::invalid_argument("build_reliability_table: need at least two checkpoints");
  }
  std::map<int, const InstanceRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  const auto t_bar = static_cast<int>(checkpoints.size());
  std::vector<ReliabilityEntry> table;
  table.reserve(pseudo.size());
  for (const auto& pl : pseudo) {
    auto it = by_id.find(pl.id);
    if (it == by_id.end()) throw std::invalid_argument("build_reliability_table: unknown instance id");
    const Vec& base = it->second->base_feature;
    Vec q_final = checkpoint_probability(checkpoints.back(), base);
    std::vector<Vec> intermediates;
    for (size_t k = 0; k + 1 < checkpoints.size(); ++k) {
      intermediates.push_back(checkpoint_probability(checkpoints[k], base));
    }
    ReliabilityEntry e;
    e.id = pl.id;
    e.pseudo_class = pl.pseudo_class;
    e.stability = stability(q_final, intermediates, t_bar);
    table.push_back(e);
  }
  return table;
}

enum class WeightMode { rdl, all_one, all_zero, global_r };

struct DownstreamConfig {
  int epochs = 12;  // T_is; also the bucket count
  double learning_rate = 0.5;
  int batch_size = 128;
  WeightMode mode = WeightMode::rdl;
  double global_r_pct = 50.0;

  void validate() const {
    if (epochs <= 0) throw std::invalid_argument("DownstreamConfig: epochs must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("DownstreamConfig: bad learning rate");
    if (batch_size <= 0) throw std::invalid_argument("DownstreamConfig: batch_size must be positive");
    if (global_r_pct < 0.0 || global_r_pct > 100.0) {
      throw std::invalid_argument("DownstreamConfig: global_r_pct outside [0,100]");
    }
  }
};

// Stand-in for the downstream network: a linear softmax classifier over the
// raw instance features.
struct DownstreamClassifier {
  Mat weight;  // C x input
  Vec bias;

  Vec logits(const Vec& x) const { return weight * x + bias; }
  int predict(const Vec& x) const {
    Eigen::Index arg = 0;
    logits(x).maxCoeff(&arg);
    return static_cast<int>(arg);
  }
};

struct DownstreamEpochStats {
  int epoch = 0;
  double loss = 0.0;
  std::map<int, double> kappa_mass_per_class;  // effective sample weight mass
  std::array<int, 10> kappa_histogram{};       // bins [0,0.1) .. [0.9,1.0]
};

struct DownstreamResult {
  DownstreamClassifier classifier;
  std::vector<DownstreamEpochStats> epochs;
  std::map<int, int> predictions;  // id -> predicted class, all instances
};

// Labeled instances train at full weight; pseudo-labeled instances are scaled
// by the per-epoch reliability weight of the selected mode.
inline DownstreamResult train_downstream(const std::vector<InstanceRecord>& records,
                                         const std::vector<ReliabilityEntry>& table,
                                         const DownstreamConfig& cfg, int num_classes, uint64_t seed) {
  cfg.validate();
  if (records.empty()) throw std::invalid_argument("train_downstream: empty dataset");
  std::map<int, const ReliabilityEntry*> entry_by_id;
  for (const auto& e : table) entry_by_id[e.id] = &e;

  struct Sample {
    const InstanceRecord* rec;
    int target;
    const ReliabilityEntry* entry;  // null for labeled samples
  };
  std::vector<Sample> samples;
  for (const auto& r : records) {
    if (r.labeled) {
      samples.push_back(Sample{&r, *r.label, nullptr});
    } else {
      auto it = entry_by_id.find(r.id);
      if (it == entry_by_id.end()) continue;  // unlabeled without a pseudo-label is not trained on
      samples.push_back(Sample{&r, it->second->pseudo_class, it->second});
    }
  }
  if (samples.empty()) throw std::invalid_argument("train_downstream: nothing to train on");

  // Fixed global filter: the bottom r% of stabilities get weight zero.
  std::map<int, double> global_weight;
  if (cfg.mode == WeightMode::global_r) {
    std::vector<const ReliabilityEntry*> sorted;
    for (const auto& e : table) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(), [](const ReliabilityEntry* a, const ReliabilityEntry* b) {
      if (a->stability != b->stability) return a->stability < b->stability;
      return a->id < b->id;
    });
    auto cut = static_cast<size_t>(
        std::floor(cfg.global_r_pct / 100.0 * static_cast<double>(sorted.size())));
    for (size_t i = 0; i < sorted.size(); ++i) global_weight[sorted[i]->id] = i < cut ? 0.0 : 1.0;
  }

  auto weight_of = [&](const ReliabilityEntry* e, int epoch) {
    switch (cfg.mode) {
      case WeightMode::rdl:
        return kappa(epoch, e->bucket, cfg.epochs);
      case WeightMode::all_one:
        return 1.0;
      case WeightMode::all_zero:
        return 0.0;
      case WeightMode::global_r:
        return global_weight.at(e->id);
    }
    return 1.0;
  };

  const int in_dim = static_cast<int>(records[0].base_feature.size());
  DownstreamResult result;
  result.classifier.weight = Mat::Zero(num_classes, in_dim);
  result.classifier.bias = Vec::Zero(num_classes);

  const int n = static_cast<int>(samples.size());
  const int batch = std::min(cfg.batch_size, n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    DownstreamEpochStats stats;
    stats.epoch = epoch;
    for (const auto& s : samples) {
      if (!s.entry) continue;
      double w = weight_of(s.entry, epoch);
      stats.kappa_mass_per_class[s.target] += w;
      auto bin = std::min<size_t>(9, static_cast<size_t>(std::floor(w * 10.0)));
      stats.kappa_histogram[bin] += 1;
    }

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, "ds-batch", static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    int num_batches = 0;
    for (int start = 0; start < n; start += batch, ++num_batches) {
      int b = std::min(batch, n - start);
      Mat dw = Mat::Zero(num_classes, in_dim);
      Vec db = Vec::Zero(num_classes);
      double batch_loss = 0.0;
      for (int k = 0; k < b; ++k) {
        const auto& s = samples[static_cast<size_t>(order[static_cast<size_t>(start + k)])];
        double w = s.entry ? weight_of(s.entry, epoch) : 1.0;
        if (w == 0.0) continue;
        Vec q = softmax(result.classifier.logits(s.rec->base_feature));
        batch_loss += -w * std::log(std::max(q[s.target], 1e-12));
        Vec dlogits = w * q;
        dlogits[s.target] -= w;
        dw += dlogits * s.rec->base_feature.transpose();
        db += dlogits;
      }
      batch_loss /= b;
      if (!std::isfinite(batch_loss)) throw TrainingDiverged("train_downstream", epoch, num_batches);
      epoch_loss += batch_loss;
      result.classifier.weight -= cfg.learning_rate / b * dw;
      result.classifier.bias -= cfg.learning_rate / b * db;
    }
    stats.loss = epoch_loss / num_batches;
    result.epochs.push_back(std::move(stats));
  }

  for (const auto& r : records) {
    result.predictions[r.id] = result.classifier.predict(r.base_feature);
  }
  return result;
}

// --- exports ----------------------------------------------------------------

inline void write_reliability_csv(const std::vector<ReliabilityEntry>& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_reliability_csv: cannot open " + path);
  out << "id,pseudo_class,stability,bucket\n";
  out.precision(17);
  for (const auto& e : table) {
    out << e.id << "," << e.pseudo_class << "," << e.stability << "," << e.bucket << "\n";
  }
}

inline std::vector<ReliabilityEntry> read_reliability_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_reliability_csv: cannot open " + path);
  std::vector<ReliabilityEntry> table;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ReliabilityEntry e;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%d", &e.id, &e.pseudo_class, &e.stability, &e.bucket) != 4) {
      throw std::runtime_error("read_reliability_csv: malformed line: " + line);
    }
    table.push_back(e);
  }
  return table;
}

inline nlohmann::json kappa_histogram_json(const std::vector<DownstreamEpochStats>& epochs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : epochs) {
    nlohmann::json j;
    j["epoch"] = s.epoch;
    j["bins"] = s.kappa_histogram;
    double total = 0.0;
    for (const auto& [cls, mass] : s.kappa_mass_per_class) total += mass;
    j["total_mass"] = total;
    nlohmann::json mass = nlohmann::json::object();
    for (const auto& [cls, m] : s.kappa_mass_per_class) mass[std::to_string(cls)] = m;
    j["mass_per_class"] = std::move(mass);
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace gcdlab
