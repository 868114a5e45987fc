#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gcdlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kUnitNormTol = 1e-6;

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_tag(std::string_view s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Derives an independent RNG stream from (seed, purpose, index). Streams are
// pure functions of their arguments, so consuming one cannot shift another.
inline std::mt19937_64 make_rng(uint64_t seed, std::string_view purpose, uint64_t index = 0) {
  uint64_t s = splitmix64(splitmix64(seed ^ hash_tag(purpose)) + index);
  return std::mt19937_64{s};
}

inline Vec gaussian_vec(int dim, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v[i] = sigma * dist(rng);
  return v;
}

inline Vec l2_normalized(const Vec& v) {
  double n = v.norm();
  if (!(n > 1e-12) || !std::isfinite(n)) {
    throw std::invalid_argument("l2_normalized: zero or non-finite vector");
  }
  return v / n;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + e^x), the smooth rectifier used by every trainable map.
inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// Zero-centered softplus. The raw rectifier carries a log(2) offset on every
// unit, which leaves a freshly initialized encoder with near-identical
// outputs; centering removes that common direction. Same derivative.
inline double smooth_relu(double x) { return softplus(x) - 0.6931471805599453; }

// Linear-interpolated percentile over the values (numpy convention).
inline double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  if (pct < 0.0 || pct > 100.0) throw std::invalid_argument("percentile: pct outside [0,100]");
  std::sort(values.begin(), values.end());
  if (values.size() == 1) return values[0];
  double rank = pct / 100.0 * static_cast<double>(values.size() - 1);
  auto lo = static_cast<size_t>(std::floor(rank));
  auto hi = static_cast<size_t>(std::ceil(rank));
  double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

// Round half to even, independent of the floating-point environment.
inline long round_half_even(double v) {
  double f = std::floor(v);
  double diff = v - f;
  auto fl = static_cast<long>(f);
  if (diff > 0.5) return fl + 1;
  if (diff < 0.5) return fl;
  return (fl % 2 == 0) ? fl : fl + 1;
}

inline double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median: empty input");
  std::sort(values.begin(), values.end());
  size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace gcdlab
