#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ras/harness/auroc.hpp"
#include "ras/predictor/risk_model.hpp"
#include "ras/tensor/optimizer.hpp"

namespace ras::predictor {

/// (1/n) sum of -y log p - (1-y) log(1-p) with p clamped to [1e-7, 1-1e-7].
inline double bce_loss(const std::vector<double>& p, const std::vector<std::uint8_t>& y) {
  if (p.size() != y.size() || p.empty()) throw std::invalid_argument("bce_loss: empty or mismatched inputs");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], 1e-7, 1.0 - 1e-7);
    s -= y[i] ? std::log(q) : std::log(1.0 - q);
  }
  return s / static_cast<double>(p.size());
}

/// Weighted BCE on the tape; `weights` zeroes padded rows.
inline Var bce_loss(const Var& p, const Array& y, const Array& weights) {
  using namespace tensor;
  Var q = clamp(p, 1e-7, 1.0 - 1e-7);
  Var pos = mul_const(log(q), y);
  Var neg = mul_const(log(affine(q, -1.0, 1.0)), Array((1.0 - y.array()).matrix()));
  return scale(sum(mul_const(add(pos, neg), weights)), -1.0);
}

/// Padded, time-major batch of sequences.
struct RiskBatch {
  std::vector<Array> x;       // B x k
  std::vector<Array> time;    // B x 2d
  std::vector<Array> sigma;   // B x k
  std::vector<Array> labels;  // B x 1
  std::vector<Array> valid;   // B x 1
  double valid_total = 0.0;

  [[nodiscard]] std::size_t steps() const noexcept { return x.size(); }
};

inline RiskBatch make_risk_batch(const std::vector<const Sequence*>& seqs, const RiskModel& m) {
  if (seqs.empty()) throw std::invalid_argument("make_risk_batch: no sequences");
  const auto B = static_cast<Eigen::Index>(seqs.size());
  const auto k = static_cast<Eigen::Index>(m.width());
  const auto D = static_cast<Eigen::Index>(2 * m.config().embed_half_dim);
  std::size_t L = 0;
  for (const auto* s : seqs) L = std::max(L, s->size());
  RiskBatch b;
  b.x.assign(L, Array::Zero(B, k));
  b.time.assign(L, Array::Zero(B, D));
  b.sigma.assign(L, Array::Zero(B, k));
  b.labels.assign(L, Array::Zero(B, 1));
  b.valid.assign(L, Array::Zero(B, 1));
  for (Eigen::Index r = 0; r < B; ++r) {
    const Sequence& s = *seqs[static_cast<std::size_t>(r)];
    if (s.x.cols() != k) throw std::invalid_argument("make_risk_batch: sequence " + s.id + " has wrong width");
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      b.x[i].row(r) = s.x.row(ii);
      b.sigma[i].row(r) = s.sigma.row(ii);
      b.time[i].row(r) = imputer::time_embed(s.times[i], m.config().embed_half_dim, m.t_max());
      b.labels[i](r, 0) = s.labels[i] ? 1.0 : 0.0;
      b.valid[i](r, 0) = 1.0;
      b.valid_total += 1.0;
    }
  }
  return b;
}

/// Draws delta ~ N(0, sigma) clipped to the open box (-2 sigma, 2 sigma).
template <typename Rng>
Array initial_perturbation(const Array& sigma, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Array d(sigma.rows(), sigma.cols());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const double s = sigma.data()[i];
    d.data()[i] = std::clamp(n(rng) * s, -2.0 * s, 2.0 * s);
  }
  return d;
}

/// Inner ascent of Alg. 1 on the Taylor residual, clipping to the box after every step.
inline Array ascend_perturbation(const RiskModel& m, const RiskModel::RunningState& prev, const Array& x,
                                 const Array& time, const Array& sigma, Array delta, double step, std::size_t steps) {
  if (steps == 0) return delta;
  Array f0;
  const Array g0 = m.input_gradient(prev, x, time, nullptr, &f0);
  for (std::size_t it = 0; it < steps; ++it) {
    Array f1;
    const Array g1 = m.input_gradient(prev, x + delta, time, nullptr, &f1);
    const Array res = f1.array() - f0.array() - (delta.array() * g0.array()).rowwise().sum();
    for (Eigen::Index r = 0; r < delta.rows(); ++r) {
      const double sgn = res(r, 0) > 0.0 ? 1.0 : (res(r, 0) < 0.0 ? -1.0 : 0.0);
      for (Eigen::Index j = 0; j < delta.cols(); ++j) {
        const double lim = 2.0 * sigma(r, j);
        delta(r, j) = std::clamp(delta(r, j) + step * sgn * (g1(r, j) - g0(r, j)), -lim, lim);
      }
    }
  }
  return delta;
}

struct BatchLoss {
  Var total;
  double cls = 0.0;  // mean BCE
  double adv = 0.0;  // mean residual
};

/// L = alpha L_cls + (1 - alpha) L_adv for one batch. `drop_rng` feeds head dropout,
/// `adv_rng` the perturbation draws; they are separate so the adversarial term never
/// shifts the classification stream.
template <typename Rng>
BatchLoss batch_loss(Tape& t, const RiskModel& m, const RiskBatch& b, TrainingMode mode, Rng& drop_rng,
                     Rng& adv_rng) {
  using namespace tensor;
  const auto& adv = m.config().adversarial;
  const bool adversarial = mode != TrainingMode::ras_n;
  const Eigen::Index B = b.x.front().rows();
  LstmState s = m.lstm.zero_state(t, B);
  Var cls = t.constant(Array::Zero(1, 1));
  Var res = t.constant(Array::Zero(1, 1));
  for (std::size_t i = 0; i < b.steps(); ++i) {
    Var x = t.constant_ref(b.x[i]);
    RiskModel::StepNodes st = m.advance(t, s, x, b.time[i]);
    const Array mask = m.head_masks(B, drop_rng);
    cls = add(cls, bce_loss(m.risk(t, st.state.h, &mask), b.labels[i], b.valid[i]));
    if (adversarial) {
      const RiskModel::RunningState prev{s.h.value(), s.c.value()};
      Array delta = initial_perturbation(b.sigma[i], adv_rng);
      if (mode == TrainingMode::ras) {
        delta = ascend_perturbation(m, prev, b.x[i], b.time[i], b.sigma[i], std::move(delta), adv.s_adv, adv.n_adv);
      }
      Var dv = t.constant(delta);
      Var p_clean = m.risk(t, st.state.h, nullptr);
      RiskModel::StepNodes moved = m.advance(t, s, t.constant(b.x[i] + delta), b.time[i]);
      Var p_moved = m.risk(t, moved.state.h, nullptr);
      Var lin = m.risk_tangent(t, s, st, p_clean, dv, nullptr);
      Var g = abs(sub(sub(p_moved, p_clean), lin));
      res = add(res, sum(mul_const(g, b.valid[i])));
    }
    s = st.state;
  }
  const double n = std::max(1.0, b.valid_total);
  BatchLoss out;
  Var l_cls = scale(cls, 1.0 / n);
  Var l_adv = scale(res, 1.0 / n);
  out.cls = l_cls.scalar();
  out.adv = l_adv.scalar();
  out.total = adversarial ? add(scale(l_cls, adv.alpha), scale(l_adv, 1.0 - adv.alpha)) : l_cls;
  return out;
}

/// Pooled AUROC over every (sequence, collection) with dropout off; NaN when one class is absent.
inline double pooled_auroc(const RiskModel& m, const std::vector<Sequence>& seqs) {
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& s : seqs) {
    const auto p = predict_risk(m, s);
    for (std::size_t i = 0; i < p.size(); ++i) {
      scores.push_back(p[i]);
      labels.push_back(s.labels[i] != 0);
    }
  }
  const auto rc = harness::rank_count(scores, labels);
  if (rc.positives == 0 || rc.negatives == 0) return std::nan("");
  return harness::auroc(scores, labels);
}

/// Decision points (sequence, collection) with at least one imputed coordinate.
inline std::vector<std::pair<std::size_t, std::size_t>> uncertain_points(const std::vector<Sequence>& seqs,
                                                                          std::size_t n, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t a = 0; a < seqs.size(); ++a) {
    for (std::size_t i = 0; i < seqs[a].size(); ++i) {
      if (seqs[a].sigma.row(static_cast<Eigen::Index>(i)).maxCoeff() > 0.0) all.emplace_back(a, i);
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (all.size() > n) all.resize(n);
  std::sort(all.begin(), all.end());
  return all;
}

inline RiskPoint risk_point(const RiskModel& m, const Sequence& s, std::size_t index) {
  return {&m, m.prefix_state(s.x, s.times, index), s.times[index], Array()};
}

/// Mean local-linearity estimate over sampled decision points.
inline double mean_local_linearity(const RiskModel& m, const std::vector<Sequence>& seqs, std::size_t points,
                                   std::size_t restarts, std::uint64_t seed) {
  const auto pts = uncertain_points(seqs, points, seed);
  if (pts.empty()) return 0.0;
  double total = 0.0;
  LinearityOptions opt;
  opt.restarts = restarts;
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const auto [a, i] = pts[n];
    const Sequence& s = seqs[a];
    opt.seed = seed + n;
    total += local_linearity(risk_point(m, s, i), s.x.row(static_cast<Eigen::Index>(i)),
                             s.sigma.row(static_cast<Eigen::Index>(i)), opt);
  }
  return total / static_cast<double>(pts.size());
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double cls_loss = 0.0;
  double adv_loss = 0.0;
  double val_auroc = std::nan("");
  double mean_gamma = std::nan("");
};

inline nlohmann::json to_json(const EpochMetrics& e) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"epoch", e.epoch},       {"loss", num(e.loss)},           {"cls_loss", num(e.cls_loss)},
          {"adv_loss", num(e.adv_loss)}, {"val_auroc", num(e.val_auroc)}, {"mean_gamma", num(e.mean_gamma)}};
}

struct TrainingLog {
  std::vector<EpochMetrics> epochs;

  void write_jsonl(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write metrics log " + path);
    for (const auto& e : epochs) os << to_json(e).dump() << '\n';
  }
};

/// Trains a predictor of the given mode. With a validation set, each epoch logs
/// its AUROC and a mean local-linearity estimate.
inline RiskModel train_predictor(const std::vector<Sequence>& train, const PredictorConfig& config, TrainingMode mode,
                                 double t_max, const std::vector<Sequence>* validation = nullptr,
                                 TrainingLog* log = nullptr) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train_predictor: empty cohort");
  const auto k = static_cast<std::size_t>(train.front().x.cols());
  RiskModel m(k, config, t_max);
  m.mode = mode;
  std::mt19937_64 batch_rng(config.seed ^ 0xB5AD4ECEDA1CE2A9ULL);
  std::mt19937_64 drop_rng(config.seed ^ 0x2545F4914F6CDD1DULL);
  std::mt19937_64 adv_rng(config.seed ^ 0x94D049BB133111EBULL);
  auto params = m.parameters();
  tensor::Optimizer opt(config.adversarial.learning_rate);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> key(train.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::uniform_real_distribution<double> jitter(0.0, 4.0);
    for (std::size_t i = 0; i < train.size(); ++i) key[i] = static_cast<double>(train[i].size()) + jitter(batch_rng);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += config.batch_size) {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + config.batch_size)));
    }
    std::shuffle(batches.begin(), batches.end(), batch_rng);

    EpochMetrics em;
    em.epoch = epoch + 1;
    double weight = 0.0;
    for (const auto& idx : batches) {
      std::vector<const Sequence*> seqs;
      for (std::size_t i : idx) seqs.push_back(&train[i]);
      RiskBatch b = make_risk_batch(seqs, m);
      Tape t(true);
      BatchLoss bl = batch_loss(t, m, b, mode, drop_rng, adv_rng);
      t.backward(bl.total);
      tensor::zero_grads(params);
      t.accumulate(params);
      if (config.clip_norm > 0.0) tensor::clip_grad_norm(params, config.clip_norm);
      opt.step(params);
      em.loss += bl.total.scalar() * b.valid_total;
      em.cls_loss += bl.cls * b.valid_total;
      em.adv_loss += bl.adv * b.valid_total;
      weight += b.valid_total;
    }
    if (weight > 0.0) {
      em.loss /= weight;
      em.cls_loss /= weight;
      em.adv_loss /= weight;
    }
    if (log) {
      if (validation && !validation->empty()) {
        em.val_auroc = pooled_auroc(m, *validation);
        if (config.log_gamma_points > 0) {
          em.mean_gamma = mean_local_linearity(m, *validation, config.log_gamma_points, config.log_gamma_restarts,
                                               config.seed + 1000 * (epoch + 1));
        }
      }
      log->epochs.push_back(em);
    }
  }
  m.trained = true;
  return m;
}

}  // namespace ras::predictor
