#pragma once

#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "gcdlab/common.hpp"

namespace gcdlab {

struct HungarianResult {
  std::vector<std::pair<int, int>> assignment;  // (row, col) pairs, size min(n, m)
  double total_cost = 0.0;
};

namespace detail {

// Potential-based shortest augmenting path on a square matrix; O(n^3).
inline std::vector<int> hungarian_square(const Mat& a) {
  const int n = static_cast<int>(a.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<size_t>(n + 1), 0.0);
  std::vector<int> p(static_cast<size_t>(n + 1), 0);
  std::vector<int> way(static_cast<size_t>(n + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n + 1), inf);
    std::vector<char> used(static_cast<size_t>(n + 1), 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = a(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j) {
    if (p[static_cast<size_t>(j)] > 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  }
  return row_to_col;
}

}  // namespace detail

// Minimum-cost matching of size min(n, m). Rectangular inputs are padded to a
// square with a constant sentinel, which a perfect matching uses a fixed
// number of times, so the real-entry total stays optimal.
inline HungarianResult hungarian(const Mat& cost) {
  if (cost.rows() < 1 || cost.cols() < 1) throw std::invalid_argument("hungarian: empty matrix");
  if (!cost.allFinite()) throw std::invalid_argument("hungarian: non-finite entries");
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  const int size = std::max(n, m);
  double sentinel = cost.cwiseAbs().maxCoeff() + 1.0;
  Mat padded = Mat::Constant(size, size, sentinel);
  padded.topLeftCorner(n, m) = cost;
  auto row_to_col = detail::hungarian_square(padded);
  HungarianResult result;
  for (int i = 0; i < n; ++i) {
    int j = row_to_col[static_cast<size_t>(i)];
    if (j < 0 || j >= m) continue;  // matched to padding
    result.assignment.emplace_back(i, j);
    result.total_cost += cost(i, j);
  }
  return result;
}

enum class MatchMode {
  joint,        // all C clusters matched jointly
  fixed_known,  // known cluster slots keep their class index, novel matched
};

struct PerClassStats {
  int count = 0;
  int correct = 0;
};

struct MetricsReport {
  double acc_all = 0.0;
  double acc_known = 0.0;  // NaN when the partition is empty
  double acc_novel = 0.0;
  int count_all = 0;
  int count_known = 0;
  int count_novel = 0;
  std::map<int, PerClassStats> per_class;  // keyed by true class
  std::vector<int> cluster_to_class;       // matched mapping
};

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["acc_all"] = r.acc_all;
  j["acc_known"] = std::isnan(r.acc_known) ? nlohmann::json() : nlohmann::json(r.acc_known);
  j["acc_novel"] = std::isnan(r.acc_novel) ? nlohmann::json() : nlohmann::json(r.acc_novel);
  j["count_all"] = r.count_all;
  j["count_known"] = r.count_known;
  j["count_novel"] = r.count_novel;
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [cls, stats] : r.per_class) {
    per_class[std::to_string(cls)] = {{"count", stats.count}, {"correct", stats.correct}};
  }
  j["per_class"] = std::move(per_class);
  j["cluster_to_class"] = r.cluster_to_class;
  return j;
}

// Hungarian-matched accuracy over all / known / novel partitions. Cluster ids
// and class ids share the same C-way index space.
inline MetricsReport match_and_score(const std::vector<int>& pseudo, const std::vector<int>& truth,
                                     const std::set<int>& known_classes, int num_classes,
                                     MatchMode mode = MatchMode::joint) {
  if (pseudo.size() != truth.size()) throw std::invalid_argument("match_and_score: size mismatch");
  if (pseudo.empty()) throw std::invalid_argument("match_and_score: empty evaluation set");
  for (size_t i = 0; i < pseudo.size(); ++i) {
    if (pseudo[i] < 0 || pseudo[i] >= num_classes || truth[i] < 0 || truth[i] >= num_classes) {
      throw std::invalid_argument("match_and_score: label outside [0, C)");
    }
  }
  Mat co = Mat::Zero(num_classes, num_classes);
  for (size_t i = 0; i < pseudo.size(); ++i) co(pseudo[i], truth[i]) += 1.0;

  std::vector<int> mapping(static_cast<size_t>(num_classes), -1);
  if (mode == MatchMode::joint) {
    auto res = hungarian(-co);
    for (const auto& [row, col] : res.assignment) mapping[static_cast<size_t>(row)] = col;
  } else {
    std::vector<int> novel_ids;
    for (int c = 0; c < num_classes; ++c) {
      if (known_classes.count(c)) {
        mapping[static_cast<size_t>(c)] = c;
      } else {
        novel_ids.push_back(c);
      }
    }
    if (!novel_ids.empty()) {
      Mat sub(static_cast<Eigen::Index>(novel_ids.size()), static_cast<Eigen::Index>(novel_ids.size()));
      for (size_t a = 0; a < novel_ids.size(); ++a)
        for (size_t b = 0; b < novel_ids.size(); ++b)
          sub(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
              -co(novel_ids[a], novel_ids[b]);
      auto res = hungarian(sub);
      for (const auto& [row, col] : res.assignment) {
        mapping[static_cast<size_t>(novel_ids[static_cast<size_t>(row)])] = novel_ids[static_cast<size_t>(col)];
      }
    }
  }

  MetricsReport report;
  report.cluster_to_class = mapping;
  int correct_known = 0, correct_novel = 0;
  for (size_t i = 0; i < pseudo.size(); ++i) {
    bool known = known_classes.count(truth[i]) > 0;
    bool correct = mapping[static_cast<size_t>(pseudo[i])] == truth[i];
    auto& pc = report.per_class[truth[i]];
    pc.count += 1;
    if (correct) pc.correct += 1;
    if (known) {
      report.count_known += 1;
      correct_known += correct ? 1 : 0;
    } else {
      report.count_novel += 1;
      correct_novel += correct ? 1 : 0;
    }
  }
  report.count_all = static_cast<int>(pseudo.size());
  report.acc_all = static_cast<double>(correct_known + correct_novel) / report.count_all;
  report.acc_known = report.count_known > 0
                         ? static_cast<double>(correct_known) / report.count_known
                         : std::numeric_limits<double>::quiet_NaN();
  report.acc_novel = report.count_novel > 0
                         ? static_cast<double>(correct_novel) / report.count_novel
                         : std::numeric_limits<double>::quiet_NaN();
  return report;
}

inline void write_per_class_csv(const MetricsReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_per_class_csv: cannot open " + path);
  out << "class,count,correct,accuracy\n";
  out.precision(17);
  for (const auto& [cls, stats] : r.per_class) {
    double acc = stats.count > 0 ? static_cast<double>(stats.correct) / stats.count : 0.0;
    out << cls << "," << stats.count << "," << stats.correct << "," << acc << "\n";
  }
}

}  // namespace gcdlab
