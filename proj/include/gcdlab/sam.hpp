#pragma once

#include <array>
#include <fstream>
#include <limits>

#include "gcdlab/common.hpp"

namespace gcdlab {

// Channel-major feature map: row c of `data` is channel c flattened to
// height*width (row-major spatial layout).
struct FeatureMap {
  int depth = 0;
  int height = 0;
  int width = 0;
  Mat data;  // depth x (height*width)

  static FeatureMap zeros(int depth, int height, int width) {
    FeatureMap f;
    f.depth = depth;
    f.height = height;
    f.width = width;
    f.data = Mat::Zero(depth, height * width);
    return f;
  }

  double& at(int c, int y, int x) { return data(c, y * width + x); }
  double at(int c, int y, int x) const { return data(c, y * width + x); }
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> values;  // row-major, {0,1}

  static BinaryMask zeros(int height, int width) {
    return BinaryMask{height, width, std::vector<uint8_t>(static_cast<size_t>(height * width), 0)};
  }
  uint8_t& at(int y, int x) { return values[static_cast<size_t>(y * width + x)]; }
  uint8_t at(int y, int x) const { return values[static_cast<size_t>(y * width + x)]; }
};

inline constexpr double kStdEps = 1e-5;

// 1x1 projection + per-channel standardization over positions with learnable
// scale/shift, plus an optional smooth rectifier. Standardizing over
// positions instead of a batch keeps single-sample runs deterministic.
struct ProjectionLayer {
  Mat weight;  // out x in
  Vec bias;
  Vec scale;
  Vec shift;
  bool rectify = true;

  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }

  static ProjectionLayer init(int in, int out, bool rectify, std::mt19937_64& rng) {
    ProjectionLayer l;
    l.rectify = rectify;
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / in));
    l.weight.resize(out, in);
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < in; ++j) l.weight(i, j) = dist(rng);
    l.bias = Vec::Zero(out);
    l.scale = Vec::Ones(out);
    l.shift = Vec::Zero(out);
    return l;
  }

  struct Cache {
    Mat input;      // in x P
    Mat pre;        // out x P, conv output
    Vec mu;         // out
    Vec inv_sigma;  // out
    Mat xhat;       // out x P
    Mat post;       // out x P, affine output
    Mat out;        // out x P
  };

  Cache forward(const Mat& input) const {
    Cache c;
    c.input = input;
    c.pre = weight * input;
    c.pre.colwise() += bias;
    c.mu = c.pre.rowwise().mean();
    Mat centered = c.pre.colwise() - c.mu;
    Vec var = centered.array().square().rowwise().mean();
    c.inv_sigma = (var.array() + kStdEps).sqrt().inverse();
    c.xhat = centered.array().colwise() * c.inv_sigma.array();
    c.post = (c.xhat.array().colwise() * scale.array()).colwise() + shift.array();
    if (rectify) {
      c.out = c.post.unaryExpr([](double v) { return softplus(v); });
    } else {
      c.out = c.post;
    }
    return c;
  }

  struct Grads {
    Mat weight;
    Vec bias;
    Vec scale;
    Vec shift;
  };

  Grads zero_grads() const {
    return Grads{Mat::Zero(weight.rows(), weight.cols()), Vec::Zero(bias.size()), Vec::Zero(scale.size()),
                 Vec::Zero(shift.size())};
  }

  // Returns dL/dinput and accumulates parameter gradients into `g`.
  Mat backward(const Cache& c, const Mat& dout, Grads& g) const {
    Mat dpost = dout;
    if (rectify) {
      dpost = dout.cwiseProduct(c.post.unaryExpr([](double v) { return sigmoid(v); }));
    }
    g.scale += dpost.cwiseProduct(c.xhat).rowwise().sum();
    g.shift += dpost.rowwise().sum();
    Mat dxhat = dpost.array().colwise() * scale.array();
    // Standardization backward over the position axis.
    Vec mean_d = dxhat.rowwise().mean();
    Vec mean_dx = dxhat.cwiseProduct(c.xhat).rowwise().mean();
    Mat dpre = ((dxhat.colwise() - mean_d) - (c.xhat.array().colwise() * mean_dx.array()).matrix());
    dpre = dpre.array().colwise() * c.inv_sigma.array();
    g.weight += dpre * c.input.transpose();
    g.bias += dpre.rowwise().sum();
    return weight.transpose() * dpre;
  }
};

// Adaptive average pooling to an s x s output grid; bins follow the
// floor/ceil edge convention so any input size maps exactly.
inline Mat adaptive_avg_pool(const FeatureMap& f, int s) {
  if (s <= 0 || s > f.height || s > f.width) {
    throw std::invalid_argument("adaptive_avg_pool: pool size exceeds spatial dims");
  }
  Mat out = Mat::Zero(f.depth, s * s);
  for (int a = 0; a < s; ++a) {
    int y0 = a * f.height / s;
    int y1 = (a * f.height + f.height + s - 1) / s;  // ceil((a+1)*H/s)
    for (int b = 0; b < s; ++b) {
      int x0 = b * f.width / s;
      int x1 = (b * f.width + f.width + s - 1) / s;
      double count = static_cast<double>((y1 - y0) * (x1 - x0));
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) out.col(a * s + b) += f.data.col(y * f.width + x);
      out.col(a * s + b) /= count;
    }
  }
  return out;
}

struct SamParams {
  std::vector<ProjectionLayer> eta;  // one per pooling branch, D -> d
  std::vector<int> pool_sizes;
  ProjectionLayer phi;  // D -> d
  ProjectionLayer psi;  // D -> d
  ProjectionLayer nu;   // (sum s_i^2 + 1) -> 1, no rectifier

  int affinity_rows() const {
    int total = 0;
    for (int s : pool_sizes) total += s * s;
    return total;
  }

  static SamParams init(int depth, const std::vector<int>& pool_sizes, std::mt19937_64& rng) {
    if (pool_sizes.empty()) throw std::invalid_argument("SamParams: need at least one pooling branch");
    SamParams p;
    p.pool_sizes = pool_sizes;
    int d = std::max(1, depth / 8);
    for (size_t i = 0; i < pool_sizes.size(); ++i) {
      p.eta.push_back(ProjectionLayer::init(depth, d, true, rng));
    }
    p.phi = ProjectionLayer::init(depth, d, true, rng);
    p.psi = ProjectionLayer::init(depth, d, true, rng);
    p.nu = ProjectionLayer::init(p.affinity_rows() + 1, 1, false, rng);
    return p;
  }
};

template <typename Params, typename F>
void visit_sam_layers(Params& p, F&& f) {
  for (size_t i = 0; i < p.eta.size(); ++i) f("eta" + std::to_string(i), p.eta[i]);
  f("phi", p.phi);
  f("psi", p.psi);
  f("nu", p.nu);
}

struct SamGrads {
  std::vector<ProjectionLayer::Grads> eta;
  ProjectionLayer::Grads phi;
  ProjectionLayer::Grads psi;
  ProjectionLayer::Grads nu;
};

struct SamCache {
  std::vector<Mat> pooled;                    // per branch, D x s^2
  std::vector<ProjectionLayer::Cache> eta;    // per branch
  Mat p_bar;                                  // d x sum(s^2)
  ProjectionLayer::Cache phi;                 // d x HW
  ProjectionLayer::Cache psi;                 // d x HW
  Mat affinity;                               // sum(s^2) x HW
  Mat ag;                                     // (sum(s^2)+1) x HW
  ProjectionLayer::Cache nu;                  // 1 x HW
  Vec s;                                      // HW, sigmoid output
};

struct SamOutput {
  Vec s;         // attention map, length H*W, values in (0,1)
  FeatureMap o;  // gated features, S broadcast over channels
  SamCache cache;
};

// O := sigmoid(nu([A, G])) (.) F with A := Pbar^T phi(F) and G the
// channel-mean of psi(F).
inline SamOutput sam_forward(const SamParams& params, const FeatureMap& f) {
  for (int s : params.pool_sizes) {
    if (s > f.height || s > f.width) {
      throw std::invalid_argument("sam_forward: pool size exceeds spatial dims");
    }
  }
  if (f.depth != params.phi.in_dim()) throw std::invalid_argument("sam_forward: depth mismatch");
  SamOutput out;
  auto& c = out.cache;
  int total = params.affinity_rows();
  int hw = f.height * f.width;

  c.p_bar.resize(params.phi.out_dim(), total);
  int col = 0;
  for (size_t i = 0; i < params.pool_sizes.size(); ++i) {
    c.pooled.push_back(adaptive_avg_pool(f, params.pool_sizes[i]));
    c.eta.push_back(params.eta[i].forward(c.pooled.back()));
    int s2 = params.pool_sizes[i] * params.pool_sizes[i];
    c.p_bar.middleCols(col, s2) = c.eta.back().out;
    col += s2;
  }
  c.phi = params.phi.forward(f.data);
  c.affinity = c.p_bar.transpose() * c.phi.out;
  c.psi = params.psi.forward(f.data);
  Eigen::RowVectorXd g = c.psi.out.colwise().mean();
  c.ag.resize(total + 1, hw);
  c.ag.topRows(total) = c.affinity;
  c.ag.row(total) = g;
  c.nu = params.nu.forward(c.ag);
  c.s = c.nu.out.row(0).transpose().unaryExpr([](double v) { return sigmoid(v); });

  out.s = c.s;
  out.o = FeatureMap::zeros(f.depth, f.height, f.width);
  out.o.data = f.data.array().rowwise() * c.s.transpose().array();
  return out;
}

// Backpropagates dL/dS and dL/dO into the module parameters. The input map is
// treated as a constant.
inline SamGrads sam_backward(const SamParams& params, const FeatureMap& f, const SamCache& c,
                             const Vec& ds_direct, const Mat& dout) {
  SamGrads g;
  for (const auto& layer : params.eta) g.eta.push_back(layer.zero_grads());
  g.phi = params.phi.zero_grads();
  g.psi = params.psi.zero_grads();
  g.nu = params.nu.zero_grads();

  Vec ds = ds_direct;
  if (dout.size() > 0) ds += (dout.cwiseProduct(f.data)).colwise().sum().transpose();
  Vec dnu_out = ds.cwiseProduct(c.s.cwiseProduct(Vec::Ones(c.s.size()) - c.s));
  Mat dag = params.nu.backward(c.nu, dnu_out.transpose(), g.nu);

  int total = params.affinity_rows();
  Mat da = dag.topRows(total);
  Eigen::RowVectorXd dg = dag.row(total);

  Mat dpsi_out = Mat::Zero(c.psi.out.rows(), c.psi.out.cols());
  dpsi_out.rowwise() = dg / static_cast<double>(c.psi.out.rows());
  params.psi.backward(c.psi, dpsi_out, g.psi);

  Mat dphi_out = c.p_bar * da;
  params.phi.backward(c.phi, dphi_out, g.phi);

  Mat dp_bar = c.phi.out * da.transpose();
  int col = 0;
  for (size_t i = 0; i < params.pool_sizes.size(); ++i) {
    int s2 = params.pool_sizes[i] * params.pool_sizes[i];
    params.eta[i].backward(c.eta[i], dp_bar.middleCols(col, s2), g.eta[i]);
    col += s2;
  }
  return g;
}

// --- boundary weights ---------------------------------------------------

// A pixel is boundary when any 4-neighbor carries the opposite mask value;
// boundary pixels themselves sit at distance zero.
inline std::vector<uint8_t> boundary_pixels(const BinaryMask& mask) {
  std::vector<uint8_t> b(static_cast<size_t>(mask.height * mask.width), 0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      uint8_t v = mask.at(y, x);
      bool edge = (y > 0 && mask.at(y - 1, x) != v) || (y + 1 < mask.height && mask.at(y + 1, x) != v) ||
                  (x > 0 && mask.at(y, x - 1) != v) || (x + 1 < mask.width && mask.at(y, x + 1) != v);
      if (edge) b[static_cast<size_t>(y * mask.width + x)] = 1;
    }
  }
  return b;
}

namespace detail {

// Felzenszwalb-Huttenlocher 1D squared distance transform.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  d.assign(static_cast<size_t>(n), 0.0);
  std::vector<int> v(static_cast<size_t>(n), 0);
  std::vector<double> z(static_cast<size_t>(n + 1), 0.0);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s = 0.0;
    while (true) {
      int p = v[static_cast<size_t>(k)];
      s = ((f[static_cast<size_t>(q)] + q * q) - (f[static_cast<size_t>(p)] + p * p)) / (2.0 * q - 2.0 * p);
      if (s <= z[static_cast<size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k + 1)] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k + 1)] < q) ++k;
    int p = v[static_cast<size_t>(k)];
    d[static_cast<size_t>(q)] = (q - p) * (q - p) + f[static_cast<size_t>(p)];
  }
}

}  // namespace detail

// Exact Euclidean distance from every pixel to the nearest boundary pixel.
// Returns an empty vector when the mask has no boundary.
inline std::vector<double> boundary_distance_field(const BinaryMask& mask) {
  auto b = boundary_pixels(mask);
  if (std::find(b.begin(), b.end(), 1) == b.end()) return {};
  const double inf = 1e18;
  const int h = mask.height, w = mask.width;
  std::vector<double> sq(static_cast<size_t>(h * w));
  for (size_t i = 0; i < sq.size(); ++i) sq[i] = b[i] ? 0.0 : inf;
  std::vector<double> col(static_cast<size_t>(h)), out_col;
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) col[static_cast<size_t>(y)] = sq[static_cast<size_t>(y * w + x)];
    detail::edt_1d(col, out_col);
    for (int y = 0; y < h; ++y) sq[static_cast<size_t>(y * w + x)] = out_col[static_cast<size_t>(y)];
  }
  std::vector<double> row(static_cast<size_t>(w)), out_row;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) row[static_cast<size_t>(x)] = sq[static_cast<size_t>(y * w + x)];
    detail::edt_1d(row, out_row);
    for (int x = 0; x < w; ++x) sq[static_cast<size_t>(y * w + x)] = out_row[static_cast<size_t>(x)];
  }
  std::vector<double> dist(sq.size());
  for (size_t i = 0; i < sq.size(); ++i) dist[i] = std::sqrt(sq[i]);
  return dist;
}

// Weight map: w wherever the boundary distance is <= d_bar on pseudo masks,
// 1 everywhere else. Ground-truth masks and masks without a boundary get a
// uniform map.
inline Vec boundary_weights(const BinaryMask& mask, double d_bar, double w, bool is_pseudo) {
  const auto n = static_cast<size_t>(mask.height * mask.width);
  Vec weights = Vec::Ones(static_cast<Eigen::Index>(n));
  if (!is_pseudo) return weights;
  double w_eff = std::min(w, 1.0);
  auto dist = boundary_distance_field(mask);
  if (dist.empty()) return weights;
  for (size_t i = 0; i < n; ++i) {
    if (dist[i] <= d_bar) weights[static_cast<Eigen::Index>(i)] = w_eff;
  }
  return weights;
}

struct AttLossGrad {
  double loss = 0.0;
  Vec ds;
};

// (1/HW) * sum_ij W_ij (S_ij - M_ij)^2
inline AttLossGrad loss_att(const Vec& s, const BinaryMask& mask, const Vec& weights) {
  const auto n = static_cast<Eigen::Index>(mask.height * mask.width);
  if (s.size() != n || weights.size() != n) throw std::invalid_argument("loss_att: shape mismatch");
  AttLossGrad out;
  out.ds = Vec::Zero(n);
  double inv = 1.0 / static_cast<double>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double diff = s[i] - static_cast<double>(mask.values[static_cast<size_t>(i)]);
    out.loss += weights[i] * diff * diff * inv;
    out.ds[i] = 2.0 * weights[i] * diff * inv;
  }
  return out;
}

struct StageConfig {
  double w = 0.25;
  std::array<int, 3> pool_sizes{18, 12, 8};
};

// Stage-dependent hyperparameters: w = 0.25*stg (capped at 1) and pool sizes
// {18,12,8} halved per stage with round-half-to-even.
inline StageConfig stage_weight(int stg) {
  if (stg < 1 || stg > 4) throw std::out_of_range("stage_weight: stage must be in {1,2,3,4}");
  StageConfig cfg;
  cfg.w = std::min(1.0, 0.25 * static_cast<double>(stg));
  double div = std::pow(2.0, stg - 1);
  cfg.pool_sizes = {static_cast<int>(round_half_even(18.0 / div)),
                    static_cast<int>(round_half_even(12.0 / div)),
                    static_cast<int>(round_half_even(8.0 / div))};
  return cfg;
}

// --- micro-trainer --------------------------------------------------------

struct SamMicroConfig {
  int depth = 16;
  int height = 12;
  int width = 12;
  std::vector<int> pool_sizes{4, 3, 2};
  int steps = 200;
  double learning_rate = 2.0;
  int num_pairs = 4;
  double d_bar = 1.0;
  double w = 0.25;
  double noise_sigma = 0.3;
  uint64_t seed = 0;
};

struct SamMicroResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  SamParams params;
  std::vector<FeatureMap> features;
  std::vector<BinaryMask> masks;
  std::vector<Vec> final_s;  // per pair, after training
};

inline void grads_add(SamGrads& acc, const SamGrads& g) {
  auto add = [](ProjectionLayer::Grads& a, const ProjectionLayer::Grads& b) {
    a.weight += b.weight;
    a.bias += b.bias;
    a.scale += b.scale;
    a.shift += b.shift;
  };
  for (size_t i = 0; i < acc.eta.size(); ++i) add(acc.eta[i], g.eta[i]);
  add(acc.phi, g.phi);
  add(acc.psi, g.psi);
  add(acc.nu, g.nu);
}

inline void apply_sgd(SamParams& p, const SamGrads& g, double lr) {
  auto step = [lr](ProjectionLayer& layer, const ProjectionLayer::Grads& grads) {
    layer.weight -= lr * grads.weight;
    layer.bias -= lr * grads.bias;
    layer.scale -= lr * grads.scale;
    layer.shift -= lr * grads.shift;
  };
  for (size_t i = 0; i < p.eta.size(); ++i) step(p.eta[i], g.eta[i]);
  step(p.phi, g.phi);
  step(p.psi, g.psi);
  step(p.nu, g.nu);
}

// Fixed synthetic feature/mask pairs, plain gradient descent on the
// boundary-weighted attention loss. Feature channels carry a mask-correlated
// signal plus noise so the attention map is learnable.
inline SamMicroResult run_sam_micro(const SamMicroConfig& cfg) {
  auto rng = make_rng(cfg.seed, "sam-micro");
  SamMicroResult res;
  std::uniform_int_distribution<int> ydist(0, cfg.height - 3);
  std::uniform_int_distribution<int> xdist(0, cfg.width - 3);
  std::uniform_int_distribution<int> extent(2, std::max(2, cfg.height / 2));
  std::uniform_real_distribution<double> amp(0.5, 1.5);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  for (int p = 0; p < cfg.num_pairs; ++p) {
    BinaryMask mask = BinaryMask::zeros(cfg.height, cfg.width);
    int y0 = ydist(rng);
    int x0 = xdist(rng);
    int y1 = std::min(cfg.height, y0 + extent(rng));
    int x1 = std::min(cfg.width, x0 + extent(rng));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) mask.at(y, x) = 1;
    FeatureMap f = FeatureMap::zeros(cfg.depth, cfg.height, cfg.width);
    for (int c = 0; c < cfg.depth; ++c) {
      double a = amp(rng) * (c % 2 == 0 ? 1.0 : -1.0);
      for (int i = 0; i < cfg.height * cfg.width; ++i) {
        f.data(c, i) = a * static_cast<double>(mask.values[static_cast<size_t>(i)]) + noise(rng);
      }
    }
    res.features.push_back(std::move(f));
    res.masks.push_back(std::move(mask));
  }

  auto param_rng = make_rng(cfg.seed, "sam-params");
  res.params = SamParams::init(cfg.depth, cfg.pool_sizes, param_rng);

  std::vector<Vec> weight_maps;
  for (const auto& mask : res.masks) {
    weight_maps.push_back(boundary_weights(mask, cfg.d_bar, cfg.w, true));
  }

  for (int step = 0; step < cfg.steps; ++step) {
    double total = 0.0;
    SamGrads acc;
    bool first = true;
    for (size_t p = 0; p < res.features.size(); ++p) {
      auto out = sam_forward(res.params, res.features[p]);
      auto lg = loss_att(out.s, res.masks[p], weight_maps[p]);
      total += lg.loss;
      auto g = sam_backward(res.params, res.features[p], out.cache, lg.ds, Mat());
      if (first) {
        acc = std::move(g);
        first = false;
      } else {
        grads_add(acc, g);
      }
    }
    total /= static_cast<double>(res.features.size());
    if (!std::isfinite(total)) {
      throw std::runtime_error("run_sam_micro: non-finite loss at step " + std::to_string(step));
    }
    if (step == 0) res.initial_loss = total;
    res.final_loss = total;
    apply_sgd(res.params, acc, cfg.learning_rate / static_cast<double>(res.features.size()));
  }
  for (size_t p = 0; p < res.features.size(); ++p) {
    res.final_s.push_back(sam_forward(res.params, res.features[p]).s);
  }
  return res;
}

// Plain-text PGM (P2) export for visual comparison of S maps and masks.
inline void write_pgm(const std::string& path, const Vec& values, int height, int width) {
  if (values.size() != static_cast<Eigen::Index>(height * width)) {
    throw std::invalid_argument("write_pgm: size mismatch");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P2\n" << width << " " << height << "\n255\n";
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = std::clamp(values[y * width + x], 0.0, 1.0);
      out << static_cast<int>(std::lround(v * 255.0));
      out << (x + 1 == width ? "\n" : " ");
    }
  }
}

}  // namespace gcdlab
