#pragma once

#include <deque>
#include <fstream>
#include <optional>
#include <utility>

#include <json.hpp>

#include "gcdlab/common.hpp"

namespace gcdlab {

// Embedding head f_d: a two-layer perceptron b(.) (input -> hidden -> embed)
// followed by a one-layer projection g(.) (embed -> embed), with L2
// normalization as part of the forward map. Smooth rectifier throughout so
// finite-difference gradient checks stay clean.
struct EncoderParams {
  Mat w1;  // hidden x input
  Vec b1;
  Mat w2;  // embed x hidden
  Vec b2;
  Mat w3;  // embed x embed
  Vec b3;

  int input_dim() const { return static_cast<int>(w1.cols()); }
  int hidden_dim() const { return static_cast<int>(w1.rows()); }
  int embed_dim() const { return static_cast<int>(w3.rows()); }

  static EncoderParams init(int input, int hidden, int embed, std::mt19937_64& rng) {
    if (input <= 0 || hidden <= 0 || embed <= 0) {
      throw std::invalid_argument("EncoderParams: dimensions must be positive");
    }
    EncoderParams p;
    auto fill = [&rng](Mat& m, int rows, int cols) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / cols));
      m.resize(rows, cols);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = dist(rng);
    };
    fill(p.w1, hidden, input);
    fill(p.w2, embed, hidden);
    fill(p.w3, embed, embed);
    p.b1 = Vec::Zero(hidden);
    p.b2 = Vec::Zero(embed);
    p.b3 = Vec::Zero(embed);
    return p;
  }
};

template <typename Params, typename F>
void visit_tensors(Params& p, F&& f) {
  f("w1", p.w1);
  f("b1", p.b1);
  f("w2", p.w2);
  f("b2", p.b2);
  f("w3", p.w3);
  f("b3", p.b3);
}

using EncoderGrads = EncoderParams;

inline EncoderGrads zeros_like(const EncoderParams& p) {
  EncoderGrads g;
  g.w1 = Mat::Zero(p.w1.rows(), p.w1.cols());
  g.b1 = Vec::Zero(p.b1.size());
  g.w2 = Mat::Zero(p.w2.rows(), p.w2.cols());
  g.b2 = Vec::Zero(p.b2.size());
  g.w3 = Mat::Zero(p.w3.rows(), p.w3.cols());
  g.b3 = Vec::Zero(p.b3.size());
  return g;
}

inline void add_scaled(EncoderParams& dst, const EncoderGrads& g, double s) {
  dst.w1 += s * g.w1;
  dst.b1 += s * g.b1;
  dst.w2 += s * g.w2;
  dst.b2 += s * g.b2;
  dst.w3 += s * g.w3;
  dst.b3 += s * g.b3;
}

inline double param_distance(const EncoderParams& a, const EncoderParams& b) {
  double d = 0.0;
  d += (a.w1 - b.w1).squaredNorm();
  d += (a.b1 - b.b1).squaredNorm();
  d += (a.w2 - b.w2).squaredNorm();
  d += (a.b2 - b.b2).squaredNorm();
  d += (a.w3 - b.w3).squaredNorm();
  d += (a.b3 - b.b3).squaredNorm();
  return std::sqrt(d);
}

struct ForwardCache {
  Vec x;
  Vec a1, h1;  // hidden pre/post rectifier
  Vec a2, h2;  // embed pre/post rectifier (output of b)
  Vec a3;      // projection output, pre normalization
  Vec z;       // unit embedding
  double inv_norm = 0.0;
};

inline ForwardCache forward_cached(const EncoderParams& p, const Vec& x) {
  if (x.size() != p.input_dim()) throw std::invalid_argument("forward: input dimension mismatch");
  if (!x.allFinite()) throw std::invalid_argument("forward: non-finite input");
  ForwardCache c;
  c.x = x;
  c.a1 = p.w1 * x + p.b1;
  c.h1 = c.a1.unaryExpr([](double v) { return smooth_relu(v); });
  c.a2 = p.w2 * c.h1 + p.b2;
  c.h2 = c.a2.unaryExpr([](double v) { return smooth_relu(v); });
  c.a3 = p.w3 * c.h2 + p.b3;
  double n = c.a3.norm();
  if (!(n > 1e-12)) throw std::runtime_error("forward: zero pre-normalization vector");
  c.inv_norm = 1.0 / n;
  c.z = c.a3 * c.inv_norm;
  return c;
}

inline Vec forward(const EncoderParams& p, const Vec& x) { return forward_cached(p, x).z; }

// Backpropagates dL/dz through the cached forward pass, accumulating
// parameter gradients into `g`. Fills dL/dx when `dx` is given.
inline void backward_into(const EncoderParams& p, const ForwardCache& c, const Vec& dz, EncoderGrads& g,
                          Vec* dx = nullptr) {
  Vec da3 = (dz - c.z * (c.z.dot(dz))) * c.inv_norm;
  g.w3.noalias() += da3 * c.h2.transpose();
  g.b3 += da3;
  Vec da2 = (p.w3.transpose() * da3).cwiseProduct(c.a2.unaryExpr([](double v) { return sigmoid(v); }));
  g.w2.noalias() += da2 * c.h1.transpose();
  g.b2 += da2;
  Vec da1 = (p.w2.transpose() * da2).cwiseProduct(c.a1.unaryExpr([](double v) { return sigmoid(v); }));
  g.w1.noalias() += da1 * c.x.transpose();
  g.b1 += da1;
  if (dx) *dx = p.w1.transpose() * da1;
}

inline std::pair<EncoderGrads, Vec> backward(const EncoderParams& p, const ForwardCache& c, const Vec& dz) {
  EncoderGrads g = zeros_like(p);
  Vec dx;
  backward_into(p, c, dz, g, &dx);
  return {std::move(g), std::move(dx)};
}

struct MomentumEncoder {
  EncoderParams params;
  double momentum = 0.99;
};

// Elementwise EMA: every parameter becomes m*old + (1-m)*online.
inline void momentum_update(const EncoderParams& online, MomentumEncoder& target) {
  double m = target.momentum;
  if (m < 0.0 || m > 1.0) throw std::invalid_argument("momentum_update: momentum outside [0,1]");
  auto blend = [m](auto& t, const auto& o) {
    if (t.rows() != o.rows() || t.cols() != o.cols()) {
      throw std::invalid_argument("momentum_update: shape mismatch");
    }
    t = m * t + (1.0 - m) * o;
  };
  blend(target.params.w1, online.w1);
  blend(target.params.b1, online.b1);
  blend(target.params.w2, online.w2);
  blend(target.params.b2, online.b2);
  blend(target.params.w3, online.w3);
  blend(target.params.b3, online.b3);
}

// Fixed-capacity FIFO of momentum embeddings Z'. Self-exclusion is by
// instance id, never by vector equality.
class EmbeddingQueue {
 public:
  struct Entry {
    int id;
    Vec z;
    std::optional<int> label;
  };

  struct View {
    std::vector<const Vec*> others;     // queue minus the query's own entries
    std::vector<const Vec*> positives;  // same-label subset of others
  };

  explicit EmbeddingQueue(size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("EmbeddingQueue: capacity must be positive");
  }

  void push(int id, Vec z, std::optional<int> label) {
    if (std::abs(z.norm() - 1.0) > kUnitNormTol) {
      throw std::invalid_argument("EmbeddingQueue: pushed vector is not unit-norm");
    }
    entries_.push_back(Entry{id, std::move(z), label});
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  View views(int query_id, std::optional<int> query_label) const {
    View v;
    v.others.reserve(entries_.size());
    for (const auto& e : entries_) {
      if (e.id == query_id) continue;
      v.others.push_back(&e.z);
      if (query_label && e.label && *e.label == *query_label) v.positives.push_back(&e.z);
    }
    return v;
  }

  size_t size() const { return entries_.size(); }
  size_t capacity() const { return capacity_; }
  const std::deque<Entry>& entries() const { return entries_; }

 private:
  size_t capacity_;
  std::deque<Entry> entries_;
};

inline std::vector<const Vec*> as_ptrs(const std::vector<Vec>& vs) {
  std::vector<const Vec*> out;
  out.reserve(vs.size());
  for (const auto& v : vs) out.push_back(&v);
  return out;
}

// Checkpoint serialization: a JSON array of tensors with a shape manifest.
inline nlohmann::json encoder_to_json(const EncoderParams& p) {
  nlohmann::json tensors = nlohmann::json::array();
  visit_tensors(p, [&tensors](const char* name, const auto& t) {
    nlohmann::json j;
    j["name"] = name;
    j["shape"] = {t.rows(), t.cols()};
    nlohmann::json data = nlohmann::json::array();
    const double* ptr = t.data();
    for (Eigen::Index i = 0; i < t.size(); ++i) data.push_back(ptr[i]);
    j["data"] = std::move(data);
    tensors.push_back(std::move(j));
  });
  return tensors;
}

inline EncoderParams encoder_from_json(const nlohmann::json& tensors) {
  EncoderParams p;
  auto load = [&tensors](const char* name, auto& t) {
    for (const auto& j : tensors) {
      if (j.at("name").get<std::string>() != name) continue;
      auto rows = j.at("shape")[0].get<Eigen::Index>();
      auto cols = j.at("shape")[1].get<Eigen::Index>();
      t.resize(rows, cols);
      const auto& data = j.at("data");
      if (static_cast<Eigen::Index>(data.size()) != t.size()) {
        throw std::runtime_error("encoder_from_json: data length does not match shape");
      }
      double* ptr = t.data();
      for (size_t i = 0; i < data.size(); ++i) ptr[i] = data[i].get<double>();
      return;
    }
    throw std::runtime_error(std::string("encoder_from_json: missing tensor ") + name);
  };
  visit_tensors(p, load);
  return p;
}

}  // namespace gcdlab
