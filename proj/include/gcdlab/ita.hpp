#pragma once

#include <map>
#include <numeric>

#include "gcdlab/common.hpp"
#include "gcdlab/encoder.hpp"

namespace gcdlab {

struct HeadTempConfig {
  double rho = 0.9;            // headness EMA momentum
  double top_percent = 1.0;    // K, percent of the queue treated as the top set
  double tau_min = 0.07;
  double tau_max = 1.0;
  double clamp_low_pct = 10.0;
  double clamp_high_pct = 90.0;

  void validate() const {
    if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("HeadTempConfig: rho outside [0,1]");
    if (top_percent <= 0.0 || top_percent > 100.0) {
      throw std::invalid_argument("HeadTempConfig: top_percent outside (0,100]");
    }
    if (!(tau_min > 0.0) || tau_min > tau_max) {
      throw std::invalid_argument("HeadTempConfig: need 0 < tau_min <= tau_max");
    }
    if (clamp_low_pct < 0.0 || clamp_high_pct > 100.0 || clamp_low_pct > clamp_high_pct) {
      throw std::invalid_argument("HeadTempConfig: bad clamp percentiles");
    }
  }
};

// Raw headness: the share of the exponentiated similarity mass held by the
// top K% most similar queue entries. The top set never shrinks below one.
inline double headness_raw(const Vec& z, const std::vector<const Vec*>& hat_z, double top_percent) {
  if (hat_z.empty()) throw std::invalid_argument("headness_raw: empty neighbor set");
  if (top_percent <= 0.0 || top_percent > 100.0) {
    throw std::invalid_argument("headness_raw: top_percent outside (0,100]");
  }
  size_t n = hat_z.size();
  auto top_count = static_cast<size_t>(std::floor(top_percent * static_cast<double>(n) / 100.0));
  top_count = std::max<size_t>(1, std::min(top_count, n));
  std::vector<double> sims(n);
  for (size_t j = 0; j < n; ++j) sims[j] = z.dot(*hat_z[j]);
  std::sort(sims.begin(), sims.end(), std::greater<double>());
  // Exponentials are shifted by the max similarity; the ratio is unchanged.
  double mx = sims[0];
  double denom = 0.0;
  double numer = 0.0;
  for (size_t j = 0; j < n; ++j) {
    double e = std::exp(sims[j] - mx);
    denom += e;
    if (j < top_count) numer += e;
  }
  return numer / denom;
}

// Per-instance headness scores and temperatures, refreshed once per epoch.
class HeadTempState {
 public:
  explicit HeadTempState(HeadTempConfig cfg) : cfg_(cfg) { cfg.validate(); }

  // h_i^t = rho * h_i^{t-1} + (1-rho) * hhat; the first observation is used
  // as-is since there is no prior score to decay.
  double update_headness(int id, double hhat) {
    auto it = h_.find(id);
    double h = (it == h_.end()) ? hhat : cfg_.rho * it->second + (1.0 - cfg_.rho) * hhat;
    h_[id] = h;
    return h;
  }

  // Clamp every score to the [low, high] percentiles of the current score
  // set, then min-max map the clamped scores onto [tau_min, tau_max].
  // Degenerate spread maps everything to tau_min.
  void assign_temperatures() {
    if (h_.size() < 2) throw std::logic_error("assign_temperatures: need at least two scores");
    std::vector<double> values;
    values.reserve(h_.size());
    for (const auto& [id, h] : h_) values.push_back(h);
    double lo = percentile(values, cfg_.clamp_low_pct);
    double hi = percentile(values, cfg_.clamp_high_pct);
    double mn = std::numeric_limits<double>::infinity();
    double mx = -std::numeric_limits<double>::infinity();
    std::map<int, double> clamped;
    for (const auto& [id, h] : h_) {
      double hb = std::clamp(h, lo, hi);
      clamped[id] = hb;
      mn = std::min(mn, hb);
      mx = std::max(mx, hb);
    }
    tau_.clear();
    double spread = mx - mn;
    for (const auto& [id, hb] : clamped) {
      double t = (spread > 0.0)
                     ? (hb - mn) / spread * (cfg_.tau_max - cfg_.tau_min) + cfg_.tau_min
                     : cfg_.tau_min;
      tau_[id] = t;
    }
  }

  double tau(int id) const {
    auto it = tau_.find(id);
    if (it == tau_.end()) throw std::out_of_range("HeadTempState: no temperature for id");
    return it->second;
  }

  const std::map<int, double>& headness() const { return h_; }
  const std::map<int, double>& temperatures() const { return tau_; }
  const HeadTempConfig& config() const { return cfg_; }

 private:
  HeadTempConfig cfg_;
  std::map<int, double> h_;
  std::map<int, double> tau_;
};

struct LossGrad {
  double loss = 0.0;
  Vec grad;  // with respect to the anchor embedding z
};

// Unsupervised instance-wise contrastive loss. The positive pair term is
// included in the denominator alongside the queue entries; queue entries are
// constants, gradients flow only into z.
inline LossGrad loss_unsup(const Vec& z, const Vec& z_pos, const std::vector<const Vec*>& hat_z, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("loss_unsup: temperature must be positive");
  size_t n = hat_z.size();
  std::vector<double> logits(n + 1);
  logits[0] = z.dot(z_pos) / tau;
  for (size_t j = 0; j < n; ++j) logits[j + 1] = z.dot(*hat_z[j]) / tau;
  double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  LossGrad out;
  out.loss = -(logits[0] - mx - std::log(sum));
  out.grad = Vec::Zero(z.size());
  double p0 = std::exp(logits[0] - mx) / sum;
  out.grad += (p0 - 1.0) / tau * z_pos;
  for (size_t j = 0; j < n; ++j) {
    double pj = std::exp(logits[j + 1] - mx) / sum;
    out.grad += pj / tau * (*hat_z[j]);
  }
  return out;
}

// Supervised contrastive loss: the mean over positives of the single-positive
// loss, each scored against the same queue set (the scored positive joins the
// denominator exactly as in loss_unsup, so |positives| = 1 with the momentum
// view reduces to it).
inline LossGrad loss_sup(const Vec& z, const std::vector<const Vec*>& positives,
                         const std::vector<const Vec*>& hat_z, double tau) {
  if (positives.empty()) throw std::invalid_argument("loss_sup: empty positive set");
  if (!(tau > 0.0)) throw std::invalid_argument("loss_sup: temperature must be positive");
  LossGrad out;
  out.grad = Vec::Zero(z.size());
  for (const Vec* pos : positives) {
    LossGrad term = loss_unsup(z, *pos, hat_z, tau);
    out.loss += term.loss;
    out.grad += term.grad;
  }
  double inv = 1.0 / static_cast<double>(positives.size());
  out.loss *= inv;
  out.grad *= inv;
  return out;
}

// Contiguous copy of the queue for batch-oriented loss evaluation. The fast
// paths below mirror loss_unsup / loss_sup exactly (asserted in tests) while
// replacing per-entry temporaries with two matrix-vector products.
struct QueueSnapshot {
  Mat z;  // entries x embed
  std::vector<int> ids;
  std::vector<int> labels;  // -1 when unlabeled

  static QueueSnapshot from(const EmbeddingQueue& queue) {
    QueueSnapshot s;
    const auto& entries = queue.entries();
    s.z.resize(static_cast<Eigen::Index>(entries.size()),
               entries.empty() ? 0 : entries.front().z.size());
    s.ids.reserve(entries.size());
    s.labels.reserve(entries.size());
    Eigen::Index row = 0;
    for (const auto& e : entries) {
      s.z.row(row++) = e.z.transpose();
      s.ids.push_back(e.id);
      s.labels.push_back(e.label ? *e.label : -1);
    }
    return s;
  }

  int count_positives(int query_id, int query_label) const {
    int n = 0;
    for (size_t j = 0; j < ids.size(); ++j) {
      if (ids[j] != query_id && labels[j] == query_label) ++n;
    }
    return n;
  }
};

struct ContrastiveScratch {
  Vec sims;
  Vec em;
  Vec qte;
  std::vector<double> buffer;
};

// Same value as headness_raw against the snapshot minus the query's own
// entries; selection instead of a full sort.
inline double headness_raw_fast(const Vec& z, const QueueSnapshot& snap, int query_id, double top_percent,
                                ContrastiveScratch& ws) {
  ws.sims.noalias() = snap.z * z;
  ws.buffer.clear();
  for (Eigen::Index j = 0; j < ws.sims.size(); ++j) {
    if (snap.ids[static_cast<size_t>(j)] != query_id) ws.buffer.push_back(ws.sims[j]);
  }
  if (ws.buffer.empty()) throw std::invalid_argument("headness_raw_fast: empty neighbor set");
  size_t n = ws.buffer.size();
  auto top_count = static_cast<size_t>(std::floor(top_percent * static_cast<double>(n) / 100.0));
  top_count = std::max<size_t>(1, std::min(top_count, n));
  std::nth_element(ws.buffer.begin(), ws.buffer.begin() + static_cast<long>(top_count - 1), ws.buffer.end(),
                   std::greater<double>());
  double mx = *std::max_element(ws.buffer.begin(), ws.buffer.begin() + static_cast<long>(top_count));
  double numer = 0.0;
  for (size_t j = 0; j < top_count; ++j) numer += std::exp(ws.buffer[j] - mx);
  double denom = numer;
  for (size_t j = top_count; j < n; ++j) denom += std::exp(ws.buffer[j] - mx);
  return numer / denom;
}

inline LossGrad loss_unsup_fast(const Vec& z, const Vec& z_pos, const QueueSnapshot& snap, int query_id,
                                double tau, ContrastiveScratch& ws) {
  if (!(tau > 0.0)) throw std::invalid_argument("loss_unsup_fast: temperature must be positive");
  const auto n = snap.z.rows();
  ws.sims.noalias() = snap.z * z / tau;
  double s0 = z.dot(z_pos) / tau;
  double mx = s0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (snap.ids[static_cast<size_t>(j)] != query_id) mx = std::max(mx, ws.sims[j]);
  }
  ws.em.resize(n);
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double e = snap.ids[static_cast<size_t>(j)] == query_id ? 0.0 : std::exp(ws.sims[j] - mx);
    ws.em[j] = e;
    sum += e;
  }
  double e0 = std::exp(s0 - mx);
  double denom = sum + e0;
  LossGrad out;
  out.loss = -(s0 - mx - std::log(denom));
  ws.qte.noalias() = snap.z.transpose() * ws.em;
  out.grad = (ws.qte / denom + (e0 / denom - 1.0) * z_pos) / tau;
  return out;
}

inline LossGrad loss_sup_fast(const Vec& z, const QueueSnapshot& snap, int query_id, int query_label,
                              double tau, ContrastiveScratch& ws) {
  if (!(tau > 0.0)) throw std::invalid_argument("loss_sup_fast: temperature must be positive");
  const auto n = snap.z.rows();
  ws.sims.noalias() = snap.z * z / tau;
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (snap.ids[static_cast<size_t>(j)] != query_id) mx = std::max(mx, ws.sims[j]);
  }
  if (!std::isfinite(mx)) throw std::invalid_argument("loss_sup_fast: empty positive set");
  ws.em.resize(n);
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double e = snap.ids[static_cast<size_t>(j)] == query_id ? 0.0 : std::exp(ws.sims[j] - mx);
    ws.em[j] = e;
    sum += e;
  }
  ws.qte.noalias() = snap.z.transpose() * ws.em;
  LossGrad out;
  out.grad = Vec::Zero(z.size());
  double inv_denom_total = 0.0;
  int count = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (snap.ids[static_cast<size_t>(k)] == query_id ||
        snap.labels[static_cast<size_t>(k)] != query_label) {
      continue;
    }
    double denom = sum + ws.em[k];
    out.loss += -(ws.sims[k] - mx - std::log(denom));
    inv_denom_total += 1.0 / denom;
    out.grad += (ws.em[k] / denom - 1.0) * snap.z.row(k).transpose();
    ++count;
  }
  if (count == 0) throw std::invalid_argument("loss_sup_fast: empty positive set");
  out.grad += inv_denom_total * ws.qte;
  double inv = 1.0 / static_cast<double>(count);
  out.loss *= inv;
  out.grad *= inv / tau;
  return out;
}

// Cosine temperature scheduling baseline: one global temperature per epoch,
// period E/2, independent of headness.
inline double ts_schedule(int epoch, int total_epochs, double tau_min, double tau_max) {
  if (epoch < 0 || epoch >= total_epochs) throw std::invalid_argument("ts_schedule: epoch outside [0,E)");
  double period = static_cast<double>(total_epochs) / 2.0;
  double tau = tau_min + 0.5 * (tau_max - tau_min) *
                             (1.0 + std::cos(2.0 * M_PI * static_cast<double>(epoch) / period));
  return std::clamp(tau, tau_min, tau_max);
}

}  // namespace gcdlab
