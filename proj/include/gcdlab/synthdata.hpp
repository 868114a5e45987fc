#pragma once

#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gcdlab/common.hpp"

namespace gcdlab {

// Synthetic long-tailed GCD benchmark: class prototypes on a hypersphere,
// Zipf-distributed instance counts, a known/novel class split, and two fixed
// augmented views per instance.
struct DatasetSpec {
  int num_classes = 2;
  int num_known = 1;
  int ambient_dim = 8;
  double zipf_exponent = 1.0;
  int instances_total = 100;
  double view_noise_sigma = 0.1;
  double intra_class_sigma = 0.1;
  double labeled_fraction_known = 0.5;
  uint64_t seed = 0;

  void validate() const {
    if (num_classes <= 0) throw std::invalid_argument("DatasetSpec: num_classes must be positive");
    if (num_known <= 0 || num_known >= num_classes) {
      throw std::invalid_argument("DatasetSpec: num_known must satisfy 0 < num_known < num_classes");
    }
    if (ambient_dim <= 0) throw std::invalid_argument("DatasetSpec: ambient_dim must be positive");
    if (zipf_exponent < 0.0) throw std::invalid_argument("DatasetSpec: zipf_exponent must be nonnegative");
    if (instances_total <= 0) throw std::invalid_argument("DatasetSpec: instances_total must be positive");
    if (instances_total < num_classes) {
      throw std::invalid_argument("DatasetSpec: instances_total < num_classes, some class would get zero instances");
    }
    if (view_noise_sigma < 0.0 || intra_class_sigma < 0.0) {
      throw std::invalid_argument("DatasetSpec: noise sigmas must be nonnegative");
    }
    if (labeled_fraction_known < 0.0 || labeled_fraction_known > 1.0) {
      throw std::invalid_argument("DatasetSpec: labeled_fraction_known must be in [0,1]");
    }
  }
};

struct InstanceRecord {
  int id = 0;
  Vec base_feature;
  Vec view_a;
  Vec view_b;
  int true_class = 0;
  bool labeled = false;
  std::optional<int> label;  // equals true_class iff labeled
};

// Largest-remainder apportionment of `total` over classes weighted by
// (c+1)^-exponent, with a floor of one instance per class.
inline std::vector<int> zipf_counts(int num_classes, double exponent, int total) {
  if (num_classes <= 0) throw std::invalid_argument("zipf_counts: num_classes must be positive");
  if (total < num_classes) throw std::invalid_argument("zipf_counts: total < num_classes");
  std::vector<double> weights(num_classes);
  double wsum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    weights[c] = std::pow(static_cast<double>(c + 1), -exponent);
    wsum += weights[c];
  }
  std::vector<int> counts(num_classes);
  std::vector<std::pair<double, int>> fracs(num_classes);  // (-frac, class) for stable ordering
  long assigned = 0;
  for (int c = 0; c < num_classes; ++c) {
    double share = static_cast<double>(total) * weights[c] / wsum;
    counts[c] = static_cast<int>(std::floor(share));
    fracs[c] = {-(share - std::floor(share)), c};
    assigned += counts[c];
  }
  std::sort(fracs.begin(), fracs.end());
  for (long k = 0; k < total - assigned; ++k) counts[fracs[static_cast<size_t>(k)].second] += 1;
  // Floor of one: move instances from the currently largest class.
  for (int c = 0; c < num_classes; ++c) {
    while (counts[c] == 0) {
      int donor = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      counts[donor] -= 1;
      counts[c] += 1;
    }
  }
  return counts;
}

inline std::vector<InstanceRecord> generate(const DatasetSpec& spec) {
  spec.validate();
  auto counts = zipf_counts(spec.num_classes, spec.zipf_exponent, spec.instances_total);

  auto proto_rng = make_rng(spec.seed, "prototypes");
  std::vector<Vec> prototypes;
  prototypes.reserve(static_cast<size_t>(spec.num_classes));
  for (int c = 0; c < spec.num_classes; ++c) {
    prototypes.push_back(l2_normalized(gaussian_vec(spec.ambient_dim, 1.0, proto_rng)));
  }

  auto inst_rng = make_rng(spec.seed, "instances");
  auto label_rng = make_rng(spec.seed, "labels");
  std::vector<InstanceRecord> records;
  records.reserve(static_cast<size_t>(spec.instances_total));
  for (int c = 0; c < spec.num_classes; ++c) {
    int n = counts[c];
    std::vector<int> slots(static_cast<size_t>(n));
    std::iota(slots.begin(), slots.end(), 0);
    int num_labeled = 0;
    if (c < spec.num_known) {
      std::shuffle(slots.begin(), slots.end(), label_rng);
      num_labeled = static_cast<int>(std::floor(spec.labeled_fraction_known * n + 0.5));
    }
    std::vector<char> is_labeled(static_cast<size_t>(n), 0);
    for (int k = 0; k < num_labeled; ++k) is_labeled[static_cast<size_t>(slots[static_cast<size_t>(k)])] = 1;
    for (int k = 0; k < n; ++k) {
      InstanceRecord rec;
      rec.true_class = c;
      rec.base_feature = l2_normalized(prototypes[static_cast<size_t>(c)] +
                                       gaussian_vec(spec.ambient_dim, spec.intra_class_sigma, inst_rng));
      rec.view_a = l2_normalized(rec.base_feature + gaussian_vec(spec.ambient_dim, spec.view_noise_sigma, inst_rng));
      rec.view_b = l2_normalized(rec.base_feature + gaussian_vec(spec.ambient_dim, spec.view_noise_sigma, inst_rng));
      rec.labeled = is_labeled[static_cast<size_t>(k)] != 0;
      if (rec.labeled) rec.label = c;
      records.push_back(std::move(rec));
    }
  }

  auto shuffle_rng = make_rng(spec.seed, "shuffle");
  std::shuffle(records.begin(), records.end(), shuffle_rng);
  for (size_t i = 0; i < records.size(); ++i) records[i].id = static_cast<int>(i);
  return records;
}

inline std::map<int, int> class_histogram(const std::vector<InstanceRecord>& records) {
  if (records.empty()) throw std::invalid_argument("class_histogram: empty record list");
  std::map<int, int> hist;
  for (const auto& r : records) hist[r.true_class] += 1;
  return hist;
}

inline nlohmann::json vec_to_json(const Vec& v) {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vec vec_from_json(const nlohmann::json& a) {
  Vec v(static_cast<Eigen::Index>(a.size()));
  for (size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

// JSON-lines dump: one record per line. `base` is carried along so staged CLI
// runs can reload the raw features for the downstream stage.
inline void write_jsonl(const std::vector<InstanceRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const auto& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["class"] = r.true_class;
    j["labeled"] = r.labeled;
    j["view_a"] = vec_to_json(r.view_a);
    j["view_b"] = vec_to_json(r.view_b);
    j["base"] = vec_to_json(r.base_feature);
    out << j.dump() << "\n";
  }
}

inline std::vector<InstanceRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_jsonl: cannot open " + path);
  std::vector<InstanceRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    InstanceRecord r;
    r.id = j.at("id").get<int>();
    r.true_class = j.at("class").get<int>();
    r.labeled = j.at("labeled").get<bool>();
    r.view_a = vec_from_json(j.at("view_a"));
    r.view_b = vec_from_json(j.at("view_b"));
    r.base_feature = vec_from_json(j.at("base"));
    if (r.labeled) r.label = r.true_class;
    records.push_back(std::move(r));
  }
  if (records.empty()) throw std::runtime_error("read_jsonl: no records in " + path);
  return records;
}

}  // namespace gcdlab
