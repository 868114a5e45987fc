#pragma once

#include <functional>
#include <set>

#include "gcdlab/common.hpp"
#include "gcdlab/encoder.hpp"
#include "gcdlab/ita.hpp"
#include "gcdlab/synthdata.hpp"

namespace gcdlab {

// Jointly trained parametric clustering head: one unit-norm prototype row per
// class slot (known and novel share the same C-way head).
struct ClusterHead {
  Mat prototypes;  // C x embed, unit-norm rows
  double temperature = 0.1;

  int num_classes() const { return static_cast<int>(prototypes.rows()); }
  int embed_dim() const { return static_cast<int>(prototypes.cols()); }

  static ClusterHead init(int num_classes, int embed, double temperature, std::mt19937_64& rng) {
    if (num_classes <= 0 || embed <= 0) throw std::invalid_argument("ClusterHead: bad dimensions");
    if (!(temperature > 0.0)) throw std::invalid_argument("ClusterHead: temperature must be positive");
    ClusterHead head;
    head.temperature = temperature;
    head.prototypes.resize(num_classes, embed);
    for (int c = 0; c < num_classes; ++c) {
      head.prototypes.row(c) = l2_normalized(gaussian_vec(embed, 1.0, rng)).transpose();
    }
    return head;
  }

  void renormalize() {
    for (int c = 0; c < prototypes.rows(); ++c) {
      double n = prototypes.row(c).norm();
      if (!(n > 1e-12)) throw std::runtime_error("ClusterHead: degenerate prototype row");
      prototypes.row(c) /= n;
    }
  }
};

inline Vec softmax(const Vec& logits) {
  double mx = logits.maxCoeff();
  Vec e = (logits.array() - mx).exp();
  return e / e.sum();
}

inline Vec cluster_logits(const ClusterHead& head, const Vec& z) {
  return (head.prototypes * z) / head.temperature;
}

// q_c = softmax(cos(z, prototype_c) / temperature)
inline Vec soft_assign(const ClusterHead& head, const Vec& z) {
  return softmax(cluster_logits(head, z));
}

// Auxiliary sharpened target: p_ic = (q_ic^2 / f_c) / sum_c' (q_ic'^2 / f_c'),
// f_c the soft cluster frequency. Empty clusters contribute zero columns.
inline Mat target_distribution(const Mat& q) {
  if (q.rows() == 0 || q.cols() == 0) throw std::invalid_argument("target_distribution: empty matrix");
  for (int i = 0; i < q.rows(); ++i) {
    if (std::abs(q.row(i).sum() - 1.0) > 1e-6 || q.row(i).minCoeff() < -1e-12) {
      throw std::invalid_argument("target_distribution: rows must be distributions");
    }
  }
  Vec freq = q.colwise().sum();
  Mat p(q.rows(), q.cols());
  for (int i = 0; i < q.rows(); ++i) {
    double row_sum = 0.0;
    for (int c = 0; c < q.cols(); ++c) {
      double u = (freq[c] > 0.0) ? q(i, c) * q(i, c) / freq[c] : 0.0;
      p(i, c) = u;
      row_sum += u;
    }
    if (!(row_sum > 0.0)) throw std::runtime_error("target_distribution: degenerate row");
    p.row(i) /= row_sum;
  }
  return p;
}

struct ClsLossGrad {
  double loss = 0.0;
  Vec dlogits;
  bool clamped = false;  // a zero q entry met a nonzero target
};

// KL(pbar || q) with gradient taken through q = softmax(logits), target held
// constant. Zero q entries against nonzero targets are clamped at 1e-12.
inline ClsLossGrad loss_kl(const Vec& pbar, const Vec& q) {
  if (pbar.size() != q.size()) throw std::invalid_argument("loss_kl: size mismatch");
  ClsLossGrad out;
  double target_mass = 0.0;
  for (int c = 0; c < q.size(); ++c) {
    double p = pbar[c];
    if (p <= 0.0) continue;
    double qc = q[c];
    if (qc < 1e-12) {
      qc = 1e-12;
      out.clamped = true;
    }
    out.loss += p * (std::log(p) - std::log(qc));
    target_mass += p;
  }
  out.dlogits = target_mass * q - pbar;
  return out;
}

// Cross-entropy against a one-hot label; gradient is q - y.
inline ClsLossGrad loss_ce(int label, const Vec& q) {
  if (label < 0 || label >= q.size()) throw std::invalid_argument("loss_ce: label out of range");
  ClsLossGrad out;
  out.loss = -std::log(std::max(q[label], 1e-12));
  out.dlogits = q;
  out.dlogits[label] -= 1.0;
  return out;
}

struct GcdLossWeights {
  double lambda = 0.35;

  void validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("GcdLossWeights: lambda outside [0,1]");
  }
};

// L_att + (1-l)L^u_rep + l L^s_rep + (1-l)L^u_cls + l L^s_cls
inline double gcd_total(const GcdLossWeights& w, double u_rep, double s_rep, double u_cls, double s_cls,
                        double att) {
  w.validate();
  return att + (1.0 - w.lambda) * u_rep + w.lambda * s_rep + (1.0 - w.lambda) * u_cls + w.lambda * s_cls;
}

struct TempArm {
  enum class Kind { ita, fixed_tau, ts_schedule };
  Kind kind = Kind::ita;
  double fixed_value = 0.07;
};

struct TrainGcdConfig {
  int num_classes = 2;  // C, assumed known
  int hidden_dim = 32;
  int embed_dim = 8;
  double encoder_momentum = 0.99;
  int queue_capacity = 0;  // 0 selects 4x batch_size
  HeadTempConfig ita;
  double lambda = 0.35;
  double cluster_temperature = 0.1;
  int epochs = 40;
  int batch_size = 128;
  double learning_rate = 0.5;
  int t_bar = 3;  // number of saved checkpoints, final model included
  TempArm arm;
  bool record_trace = false;

  void validate() const {
    if (num_classes <= 0) throw std::invalid_argument("TrainGcdConfig: num_classes must be positive");
    if (hidden_dim <= 0 || embed_dim <= 0) throw std::invalid_argument("TrainGcdConfig: bad dimensions");
    if (encoder_momentum < 0.0 || encoder_momentum >= 1.0) {
      throw std::invalid_argument("TrainGcdConfig: encoder_momentum outside [0,1)");
    }
    if (queue_capacity < 0) throw std::invalid_argument("TrainGcdConfig: negative queue capacity");
    ita.validate();
    GcdLossWeights{lambda}.validate();
    if (!(cluster_temperature > 0.0)) throw std::invalid_argument("TrainGcdConfig: bad cluster temperature");
    if (epochs < 0) throw std::invalid_argument("TrainGcdConfig: negative epochs");
    if (batch_size <= 0) throw std::invalid_argument("TrainGcdConfig: batch_size must be positive");
    if (t_bar < 2) throw std::invalid_argument("TrainGcdConfig: t_bar must be at least 2");
    if (epochs > 0 && epochs < t_bar) {
      throw std::invalid_argument("TrainGcdConfig: epochs must be >= t_bar for distinct checkpoints");
    }
    if (arm.kind == TempArm::Kind::fixed_tau && !(arm.fixed_value > 0.0)) {
      throw std::invalid_argument("TrainGcdConfig: fixed temperature must be positive");
    }
  }
};

struct PseudoLabel {
  int id = 0;
  int pseudo_class = 0;
  double max_q = 0.0;
};

struct GcdCheckpoint {
  int epoch = 0;
  EncoderParams encoder;
  ClusterHead head;
};

struct TrainTrace {
  EncoderParams init_encoder;
  Mat init_prototypes;
  std::vector<std::vector<int>> batch_orders;  // per-epoch instance order
};

struct GcdResult {
  EncoderParams encoder;
  ClusterHead head;
  std::vector<GcdCheckpoint> checkpoints;
  std::vector<PseudoLabel> pseudo_labels;  // unlabeled instances only
  std::vector<double> epoch_losses;
  std::map<int, double> headness;      // final refresh, ita arm only
  std::map<int, double> temperatures;  // final refresh, ita arm only
  TrainTrace trace;                    // populated when record_trace
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& stage, int epoch, int step)
      : std::runtime_error(stage + ": non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step)),
        epoch(epoch),
        step(step) {}
  int epoch;
  int step;
};

using EpochTauSink = std::function<void(int epoch, const std::map<int, double>& headness,
                                        const std::map<int, double>& taus)>;

namespace detail {

inline std::vector<int> checkpoint_epochs(int epochs, int t_bar) {
  std::vector<int> out;
  for (int k = 1; k <= t_bar; ++k) {
    out.push_back(static_cast<int>(
        std::ceil(static_cast<double>(epochs) * static_cast<double>(k) / static_cast<double>(t_bar))));
  }
  return out;
}

}  // namespace detail

// Joint GCD training: instance-wise temperature contrastive learning plus the
// deep clustering and supervised classification losses, with a momentum twin
// feeding the embedding queue. The attention arm is disabled here (the
// perceptron encoder has no spatial maps), so its term contributes zero.
inline GcdResult train_gcd(const std::vector<InstanceRecord>& records, const TrainGcdConfig& cfg,
                           uint64_t seed, const EpochTauSink& tau_sink = nullptr) {
  cfg.validate();
  if (records.empty()) throw std::invalid_argument("train_gcd: empty dataset");
  const int n = static_cast<int>(records.size());
  const int in_dim = static_cast<int>(records[0].base_feature.size());
  const int batch = std::min(cfg.batch_size, n);
  const size_t capacity =
      cfg.queue_capacity > 0 ? static_cast<size_t>(cfg.queue_capacity) : static_cast<size_t>(4 * batch);
  const GcdLossWeights weights{cfg.lambda};

  auto init_rng = make_rng(seed, "init");
  GcdResult result;
  result.encoder = EncoderParams::init(in_dim, cfg.hidden_dim, cfg.embed_dim, init_rng);
  result.head = ClusterHead::init(cfg.num_classes, cfg.embed_dim, cfg.cluster_temperature, init_rng);
  MomentumEncoder target{result.encoder, cfg.encoder_momentum};

  if (cfg.record_trace) {
    result.trace.init_encoder = result.encoder;
    result.trace.init_prototypes = result.head.prototypes;
  }

  auto emit_pseudo_labels = [&]() {
    result.pseudo_labels.clear();
    for (const auto& r : records) {
      if (r.labeled) continue;
      Vec q = soft_assign(result.head, forward(result.encoder, r.base_feature));
      Eigen::Index arg = 0;
      double mx = q.maxCoeff(&arg);
      result.pseudo_labels.push_back(PseudoLabel{r.id, static_cast<int>(arg), mx});
    }
  };

  if (cfg.epochs == 0) {
    result.checkpoints.push_back(GcdCheckpoint{0, result.encoder, result.head});
    emit_pseudo_labels();
    return result;
  }

  EmbeddingQueue queue(capacity);
  for (const auto& r : records) {
    queue.push(r.id, forward(target.params, r.view_b), r.label);
  }

  HeadTempState state(cfg.ita);
  const auto ckpt_epochs = detail::checkpoint_epochs(cfg.epochs, cfg.t_bar);
  std::set<int> ckpt_set(ckpt_epochs.begin(), ckpt_epochs.end());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Epoch-level temperature refresh.
    std::map<int, double> taus;
    double uniform_tau = 0.0;
    if (cfg.arm.kind == TempArm::Kind::ita) {
      auto snapshot = QueueSnapshot::from(queue);
      ContrastiveScratch scratch;
      for (const auto& r : records) {
        Vec z = forward(result.encoder, r.view_a);
        state.update_headness(r.id, headness_raw_fast(z, snapshot, r.id, cfg.ita.top_percent, scratch));
      }
      state.assign_temperatures();
      taus = state.temperatures();
      if (tau_sink) tau_sink(epoch, state.headness(), taus);
    } else if (cfg.arm.kind == TempArm::Kind::fixed_tau) {
      uniform_tau = cfg.arm.fixed_value;
    } else {
      uniform_tau = ts_schedule(epoch, cfg.epochs, cfg.ita.tau_min, cfg.ita.tau_max);
    }
    auto tau_of = [&](int id) {
      return cfg.arm.kind == TempArm::Kind::ita ? taus.at(id) : uniform_tau;
    };

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    auto batch_rng = make_rng(seed, "batch", static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), batch_rng);
    if (cfg.record_trace) result.trace.batch_orders.push_back(order);

    double lr = cfg.learning_rate * 0.5 *
                (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(cfg.epochs)));
    double epoch_loss = 0.0;
    int num_batches = 0;

    ContrastiveScratch scratch;
    for (int start = 0; start < n; start += batch, ++num_batches) {
      int b = std::min(batch, n - start);
      std::vector<ForwardCache> caches(static_cast<size_t>(b));
      std::vector<Vec> z_prime(static_cast<size_t>(b));
      Mat q_batch(b, cfg.num_classes);
      for (int k = 0; k < b; ++k) {
        const auto& r = records[static_cast<size_t>(order[static_cast<size_t>(start + k)])];
        caches[static_cast<size_t>(k)] = forward_cached(result.encoder, r.view_a);
        z_prime[static_cast<size_t>(k)] = forward(target.params, r.view_b);
        q_batch.row(k) = soft_assign(result.head, caches[static_cast<size_t>(k)].z).transpose();
      }
      Mat p_batch = target_distribution(q_batch);

      // First pass: per-instance loss pieces and counts for normalization.
      auto snapshot = QueueSnapshot::from(queue);
      std::vector<LossGrad> g_urep(static_cast<size_t>(b));
      std::vector<LossGrad> g_srep(static_cast<size_t>(b));
      std::vector<char> has_srep(static_cast<size_t>(b), 0);
      int num_labeled = 0;
      int num_srep = 0;
      double sum_urep = 0.0, sum_srep = 0.0, sum_ucls = 0.0, sum_scls = 0.0;
      std::vector<ClsLossGrad> g_cls(static_cast<size_t>(b));
      std::vector<ClsLossGrad> g_sup_cls(static_cast<size_t>(b));
      for (int k = 0; k < b; ++k) {
        const auto& r = records[static_cast<size_t>(order[static_cast<size_t>(start + k)])];
        double tau = tau_of(r.id);
        g_urep[static_cast<size_t>(k)] = loss_unsup_fast(caches[static_cast<size_t>(k)].z,
                                                         z_prime[static_cast<size_t>(k)], snapshot,
                                                         r.id, tau, scratch);
        sum_urep += g_urep[static_cast<size_t>(k)].loss;
        if (r.labeled) {
          ++num_labeled;
          if (snapshot.count_positives(r.id, *r.label) > 0) {
            g_srep[static_cast<size_t>(k)] = loss_sup_fast(caches[static_cast<size_t>(k)].z, snapshot,
                                                           r.id, *r.label, tau, scratch);
            has_srep[static_cast<size_t>(k)] = 1;
            sum_srep += g_srep[static_cast<size_t>(k)].loss;
            ++num_srep;
          }
          g_sup_cls[static_cast<size_t>(k)] = loss_ce(*r.label, q_batch.row(k).transpose());
          sum_scls += g_sup_cls[static_cast<size_t>(k)].loss;
        }
        g_cls[static_cast<size_t>(k)] = loss_kl(p_batch.row(k).transpose(), q_batch.row(k).transpose());
        sum_ucls += g_cls[static_cast<size_t>(k)].loss;
      }
      double mean_urep = sum_urep / b;
      double mean_srep = num_srep > 0 ? sum_srep / num_srep : 0.0;
      double mean_ucls = sum_ucls / b;
      double mean_scls = num_labeled > 0 ? sum_scls / num_labeled : 0.0;
      double total = gcd_total(weights, mean_urep, mean_srep, mean_ucls, mean_scls, 0.0);
      if (!std::isfinite(total)) throw TrainingDiverged("train_gcd", epoch, num_batches);
      epoch_loss += total;

      // Second pass: accumulate gradients in batch index order.
      EncoderGrads acc = zeros_like(result.encoder);
      Mat dproto = Mat::Zero(cfg.num_classes, cfg.embed_dim);
      for (int k = 0; k < b; ++k) {
        const auto& r = records[static_cast<size_t>(order[static_cast<size_t>(start + k)])];
        Vec dlogits = (1.0 - cfg.lambda) / b * g_cls[static_cast<size_t>(k)].dlogits;
        if (r.labeled) dlogits += cfg.lambda / num_labeled * g_sup_cls[static_cast<size_t>(k)].dlogits;
        Vec dz = result.head.prototypes.transpose() * dlogits / result.head.temperature;
        dz += (1.0 - cfg.lambda) / b * g_urep[static_cast<size_t>(k)].grad;
        if (has_srep[static_cast<size_t>(k)]) dz += cfg.lambda / num_srep * g_srep[static_cast<size_t>(k)].grad;
        backward_into(result.encoder, caches[static_cast<size_t>(k)], dz, acc);
        dproto.noalias() += dlogits * caches[static_cast<size_t>(k)].z.transpose() / result.head.temperature;
      }
      add_scaled(result.encoder, acc, -lr);
      result.head.prototypes -= lr * dproto;
      result.head.renormalize();
      momentum_update(result.encoder, target);
      for (int k = 0; k < b; ++k) {
        const auto& r = records[static_cast<size_t>(order[static_cast<size_t>(start + k)])];
        queue.push(r.id, z_prime[static_cast<size_t>(k)], r.label);
      }
    }
    result.epoch_losses.push_back(epoch_loss / num_batches);
    if (ckpt_set.count(epoch + 1)) {
      result.checkpoints.push_back(GcdCheckpoint{epoch + 1, result.encoder, result.head});
    }
  }

  if (cfg.arm.kind == TempArm::Kind::ita) {
    result.headness = state.headness();
    result.temperatures = state.temperatures();
  }
  emit_pseudo_labels();
  return result;
}

inline nlohmann::json head_to_json(const ClusterHead& head) {
  nlohmann::json j;
  j["temperature"] = head.temperature;
  j["shape"] = {head.prototypes.rows(), head.prototypes.cols()};
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index i = 0; i < head.prototypes.size(); ++i) data.push_back(head.prototypes.data()[i]);
  j["data"] = std::move(data);
  return j;
}

inline ClusterHead head_from_json(const nlohmann::json& j) {
  ClusterHead head;
  head.temperature = j.at("temperature").get<double>();
  auto rows = j.at("shape")[0].get<Eigen::Index>();
  auto cols = j.at("shape")[1].get<Eigen::Index>();
  head.prototypes.resize(rows, cols);
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != head.prototypes.size()) {
    throw std::runtime_error("head_from_json: data length does not match shape");
  }
  for (size_t i = 0; i < data.size(); ++i) head.prototypes.data()[i] = data[i].get<double>();
  return head;
}

inline void save_checkpoint(const GcdCheckpoint& ck, const std::string& path) {
  nlohmann::json j;
  j["format"] = "gcdlab-checkpoint-v1";
  j["epoch"] = ck.epoch;
  j["encoder"] = encoder_to_json(ck.encoder);
  j["head"] = head_to_json(ck.head);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << j.dump(2) << "\n";
}

inline GcdCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  in >> j;
  GcdCheckpoint ck;
  ck.epoch = j.at("epoch").get<int>();
  ck.encoder = encoder_from_json(j.at("encoder"));
  ck.head = head_from_json(j.at("head"));
  return ck;
}

}  // namespace gcdlab
