#pragma once

// Recurrent Gaussian imputer.
//
// Each collection is mean-filled (0 after z-scoring), concatenated with its
// time embedding, embedded by a dense layer and fed to an LSTM. Two heads read
// the LSTM state: mu = w_mu s + b_mu and sigma = ReLU(w_sigma s + b_sigma).
// Training runs in two phases. The first fits everything except the sigma head
// on masked observed labs; the second fits only the sigma head on frozen states.

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

#include "ras/cohort/record.hpp"
#include "ras/cohort/schema.hpp"
#include "ras/imputer/standardizer.hpp"
#include "ras/imputer/time_embedding.hpp"
#include "ras/tensor/layers.hpp"
#include "ras/tensor/ops.hpp"
#include "ras/tensor/optimizer.hpp"
#include "ras/tensor/snapshot.hpp"

namespace ras::imputer {

using cohort::Mask;
using tensor::Parameter;
using tensor::Tape;
using tensor::Var;

struct ImputerConfig {
  std::size_t embed_half_dim = 32;
  std::size_t hidden = 64;
  double mask_fraction = 0.2;
  std::size_t mean_epochs = 30;
  std::size_t sigma_epochs = 60;
  std::size_t sigma_plans = 3;  // mask draws whose residuals feed the sigma phase
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double sigma_learning_rate = 3e-3;
  double sigma_floor = 1e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 11;

  void validate() const {
    if (embed_half_dim == 0 || hidden == 0) throw std::invalid_argument("imputer: zero layer size");
    if (!(mask_fraction > 0.0 && mask_fraction <= 1.0)) {
      throw std::invalid_argument("imputer: mask_fraction must lie in (0,1]");
    }
    if (batch_size == 0) throw std::invalid_argument("imputer: batch_size must be positive");
    if (!(learning_rate > 0.0) || !(sigma_learning_rate > 0.0)) {
      throw std::invalid_argument("imputer: learning rates must be positive");
    }
    if (!(sigma_floor > 0.0)) throw std::invalid_argument("imputer: sigma_floor must be positive");
    if (sigma_plans == 0) throw std::invalid_argument("imputer: sigma_plans must be positive");
  }
};

inline nlohmann::json to_json(const ImputerConfig& c) {
  return {{"embed_half_dim", c.embed_half_dim}, {"hidden", c.hidden},
          {"mask_fraction", c.mask_fraction},   {"mean_epochs", c.mean_epochs},
          {"sigma_epochs", c.sigma_epochs},     {"sigma_plans", c.sigma_plans},
          {"batch_size", c.batch_size},         {"learning_rate", c.learning_rate},
          {"sigma_learning_rate", c.sigma_learning_rate}, {"sigma_floor", c.sigma_floor},
          {"clip_norm", c.clip_norm},           {"seed", c.seed}};
}

inline ImputerConfig imputer_config_from_json(const nlohmann::json& j) {
  ImputerConfig c;
  c.embed_half_dim = j.value("embed_half_dim", c.embed_half_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.mask_fraction = j.value("mask_fraction", c.mask_fraction);
  c.mean_epochs = j.value("mean_epochs", c.mean_epochs);
  c.sigma_epochs = j.value("sigma_epochs", c.sigma_epochs);
  c.sigma_plans = j.value("sigma_plans", c.sigma_plans);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.sigma_learning_rate = j.value("sigma_learning_rate", c.sigma_learning_rate);
  c.sigma_floor = j.value("sigma_floor", c.sigma_floor);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

/// Training mask for one record: a subset of its observed lab cells.
struct MaskPlan {
  Mask M;
  double mask_fraction = 0.2;
};

/// Each observed lab cell is hidden independently with probability `fraction`.
template <typename Rng>
MaskPlan draw_mask_plan(const cohort::PatientRecord& p, const cohort::VariableSchema& schema,
                        double fraction, Rng& rng) {
  MaskPlan plan;
  plan.mask_fraction = fraction;
  plan.M = Mask::Constant(p.observed.rows(), p.observed.cols(), false);
  std::bernoulli_distribution pick(fraction);
  for (Eigen::Index i = 0; i < p.observed.rows(); ++i) {
    for (std::size_t j : schema.lab_indices()) {
      const auto jj = static_cast<Eigen::Index>(j);
      if (p.observed(i, jj) && pick(rng)) plan.M(i, jj) = true;
    }
  }
  return plan;
}

/// Sum of squared errors over masked cells.
inline double masked_squared_error(const Mask& M, const Array& mu, const Array& z) {
  if (M.rows() != mu.rows() || M.cols() != mu.cols() || z.rows() != mu.rows() || z.cols() != mu.cols()) {
    throw std::invalid_argument("masked_squared_error: shape mismatch");
  }
  double s = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    if (M.data()[i]) s += (mu.data()[i] - z.data()[i]) * (mu.data()[i] - z.data()[i]);
  }
  return s;
}

/// Sum over masked cells of r^2/(2 sigma^2) + sigma^2/2 with r = mu - z.
inline double masked_sigma_objective(const Mask& M, const Array& mu, const Array& sigma, const Array& z) {
  if (M.rows() != mu.rows() || M.cols() != mu.cols() || sigma.rows() != mu.rows() ||
      sigma.cols() != mu.cols() || z.rows() != mu.rows() || z.cols() != mu.cols()) {
    throw std::invalid_argument("masked_sigma_objective: shape mismatch");
  }
  double s = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    if (!M.data()[i]) continue;
    const double r = mu.data()[i] - z.data()[i];
    const double v = sigma.data()[i] * sigma.data()[i];
    s += r * r / (2.0 * v) + v / 2.0;
  }
  return s;
}

/// Imputed means and deviations of one record, in original and standardized units.
struct ImputationDistribution {
  std::vector<double> times;
  Mask observed;
  Array mu;       // original units
  Array sigma;    // original units, floored head output for every cell
  Array x;        // observed value where observed, mu elsewhere
  Array z_mu;     // standardized
  Array z_sigma;  // standardized, >= sigma_floor
  Array z_x;

  [[nodiscard]] std::size_t size() const noexcept { return times.size(); }

  /// Standardized sigma with observed cells set to 0.
  [[nodiscard]] Array effective_z_sigma() const {
    Array s = z_sigma;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      if (observed.data()[i]) s.data()[i] = 0.0;
    }
    return s;
  }
};

/// Record with z-scored values; unobserved cells hold 0 (the training mean).
struct StandardizedRecord {
  std::vector<double> times;
  Array z;
  Mask observed;
};

inline StandardizedRecord standardize(const cohort::PatientRecord& p, const Standardizer& st) {
  StandardizedRecord r;
  r.times = p.times;
  r.observed = p.observed;
  r.z = Array::Zero(p.values.rows(), p.values.cols());
  for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.values.cols(); ++j) {
      if (p.observed(i, j)) r.z(i, j) = st.forward(static_cast<std::size_t>(j), p.values(i, j));
    }
  }
  return r;
}

/// Padded, time-major batch. Rows past a record's end carry zero weight.
struct SequenceBatch {
  std::vector<Array> inputs;   // per step: B x (k + 2d)
  std::vector<Array> targets;  // per step: B x k
  std::vector<Array> weights;  // per step: B x k, 1 on supervised cells
  std::vector<std::size_t> lengths;
  double weight_total = 0.0;

  [[nodiscard]] std::size_t steps() const noexcept { return inputs.size(); }
  [[nodiscard]] Eigen::Index batch() const noexcept {
    return inputs.empty() ? 0 : inputs.front().rows();
  }
};

/// Builds a batch; masked cells are hidden from the input and become targets.
inline SequenceBatch make_sequence_batch(const std::vector<const StandardizedRecord*>& records,
                                         const std::vector<const Mask*>& masks, std::size_t d,
                                         double t_max) {
  if (records.empty()) throw std::invalid_argument("make_sequence_batch: no records");
  if (!masks.empty() && masks.size() != records.size()) {
    throw std::invalid_argument("make_sequence_batch: one mask per record required");
  }
  const auto B = static_cast<Eigen::Index>(records.size());
  const Eigen::Index k = records.front()->z.cols();
  const auto D = static_cast<Eigen::Index>(2 * d);
  std::size_t L = 0;
  for (const auto* r : records) L = std::max(L, r->times.size());
  SequenceBatch b;
  b.inputs.assign(L, Array::Zero(B, k + D));
  b.targets.assign(L, Array::Zero(B, k));
  b.weights.assign(L, Array::Zero(B, k));
  for (Eigen::Index p = 0; p < B; ++p) {
    const auto& r = *records[static_cast<std::size_t>(p)];
    const Mask* m = masks.empty() ? nullptr : masks[static_cast<std::size_t>(p)];
    if (r.z.cols() != k) throw std::invalid_argument("make_sequence_batch: width mismatch");
    b.lengths.push_back(r.times.size());
    for (std::size_t s = 0; s < r.times.size(); ++s) {
      const auto si = static_cast<Eigen::Index>(s);
      Array& in = b.inputs[s];
      for (Eigen::Index j = 0; j < k; ++j) {
        const bool hidden = m && (*m)(si, j);
        if (r.observed(si, j) && !hidden) in(p, j) = r.z(si, j);
        if (hidden) {
          b.targets[s](p, j) = r.z(si, j);
          b.weights[s](p, j) = 1.0;
          b.weight_total += 1.0;
        }
      }
      in.block(p, k, 1, D) = time_embed(r.times[s], d, t_max);
    }
  }
  return b;
}

class Imputer {
 public:
  struct RunningState {
    Array h;
    Array c;
  };

  struct StepOutput {
    RunningState state;
    Array z_mu;     // rows x k
    Array z_sigma;  // rows x k, floored
  };

  Imputer() = default;

  Imputer(cohort::VariableSchema schema, ImputerConfig config, double t_max, Standardizer st)
      : schema_(std::move(schema)), config_(config), t_max_(t_max), standardizer_(std::move(st)) {
    schema_.validate();
    config_.validate();
    if (!(t_max_ > 0.0)) throw std::invalid_argument("imputer: T_max must be positive");
    const auto k = static_cast<Eigen::Index>(schema_.size());
    if (standardizer_.mean.size() != schema_.size()) {
      throw std::invalid_argument("imputer: standardizer width does not match schema");
    }
    const auto d = static_cast<Eigen::Index>(config_.embed_half_dim);
    const auto H = static_cast<Eigen::Index>(config_.hidden);
    std::mt19937_64 rng(config_.seed);
    embed = tensor::Dense("imputer.embed", k + 2 * d, d, rng);
    lstm = tensor::LstmCell("imputer.lstm", d, H, rng);
    mu_head = tensor::Dense("imputer.mu", H, k, rng);
    sigma_head = tensor::Dense("imputer.sigma", H, k, rng);
  }

  tensor::Dense embed;
  tensor::LstmCell lstm;
  tensor::Dense mu_head;
  tensor::Dense sigma_head;
  bool mean_trained = false;
  bool sigma_trained = false;

  [[nodiscard]] const cohort::VariableSchema& schema() const noexcept { return schema_; }
  [[nodiscard]] const ImputerConfig& config() const noexcept { return config_; }
  [[nodiscard]] const Standardizer& standardizer() const noexcept { return standardizer_; }
  [[nodiscard]] double t_max() const noexcept { return t_max_; }
  [[nodiscard]] std::size_t width() const noexcept { return schema_.size(); }
  [[nodiscard]] std::size_t embed_half_dim() const noexcept { return config_.embed_half_dim; }
  [[nodiscard]] double sigma_floor() const noexcept { return config_.sigma_floor; }

  std::vector<Parameter*> trunk_parameters() {
    return {&embed.weight, &embed.bias, &lstm.weight, &lstm.bias, &mu_head.weight, &mu_head.bias};
  }
  std::vector<Parameter*> sigma_parameters() { return {&sigma_head.weight, &sigma_head.bias}; }
  std::vector<Parameter*> parameters() {
    auto p = trunk_parameters();
    p.push_back(&sigma_head.weight);
    p.push_back(&sigma_head.bias);
    return p;
  }
  std::vector<const Parameter*> parameters() const {
    return {&embed.weight, &embed.bias, &lstm.weight, &lstm.bias,
            &mu_head.weight, &mu_head.bias, &sigma_head.weight, &sigma_head.bias};
  }

  /// e_i = w_e [Z_i ; e^t_i] + b_e.
  Var embed_collection(Tape& t, const Var& z_filled, const Var& time_embedding) const {
    const auto k = static_cast<Eigen::Index>(width());
    const auto D = static_cast<Eigen::Index>(2 * embed_half_dim());
    if (z_filled.cols() != k || time_embedding.cols() != D || z_filled.rows() != time_embedding.rows()) {
      throw std::invalid_argument("embed_collection: got " + tensor::shape_of(z_filled.value()) + " and " +
                                  tensor::shape_of(time_embedding.value()) + ", expected width " +
                                  std::to_string(k) + " and " + std::to_string(D));
    }
    return embed.forward(t, tensor::concat_cols({z_filled, time_embedding}));
  }

  tensor::LstmState advance(Tape& t, const tensor::LstmState& s, const Var& input) const {
    return lstm.step(t, embed.forward(t, input), s);
  }

  Var mean_head(Tape& t, const Var& h) const { return mu_head.forward(t, h); }

  /// ReLU head output, floored so it is usable as a deviation.
  Var deviation_head(Tape& t, const Var& h) const {
    return tensor::clamp_min(tensor::relu(sigma_head.forward(t, h)), config_.sigma_floor);
  }

  [[nodiscard]] RunningState initial_state(Eigen::Index rows = 1) const {
    const auto H = static_cast<Eigen::Index>(config_.hidden);
    return {Array::Zero(rows, H), Array::Zero(rows, H)};
  }

  /// Standardized, mean-filled copy of one collection.
  [[nodiscard]] Array standardize_row(const Array& values, const Mask& observed) const {
    Array z = Array::Zero(values.rows(), values.cols());
    for (Eigen::Index r = 0; r < values.rows(); ++r) {
      for (Eigen::Index j = 0; j < values.cols(); ++j) {
        if (observed(r, j)) z(r, j) = standardizer_.forward(static_cast<std::size_t>(j), values(r, j));
      }
    }
    return z;
  }

  /// Advances every row of `prev` by one collection taken at time `t_hours`.
  [[nodiscard]] StepOutput step(const RunningState& prev, const Array& z_filled, double t_hours) const {
    if (z_filled.cols() != static_cast<Eigen::Index>(width()) || z_filled.rows() != prev.h.rows()) {
      throw std::invalid_argument("imputer step: input " + tensor::shape_of(z_filled) + " does not match state " +
                                  tensor::shape_of(prev.h));
    }
    Tape t(false);
    const Array et = time_embed(t_hours, embed_half_dim(), t_max_).replicate(z_filled.rows(), 1);
    Var e = embed_collection(t, t.constant_ref(z_filled), t.constant(et));
    tensor::LstmState s = lstm.step(t, e, {t.constant_ref(prev.h), t.constant_ref(prev.c)});
    StepOutput out;
    out.state = {s.h.value(), s.c.value()};
    out.z_mu = mean_head(t, s.h).value();
    out.z_sigma = deviation_head(t, s.h).value();
    return out;
  }

  [[nodiscard]] ImputationDistribution impute(const cohort::PatientRecord& p) const {
    if (p.size() == 0) throw std::invalid_argument("impute: record " + p.id + " is empty");
    p.validate(schema_);
    for (double t : p.times) {
      if (t < 0.0 || t > 1.5 * t_max_) {
        throw std::invalid_argument("impute: record " + p.id + " has time " + std::to_string(t) +
                                    " outside [0, " + std::to_string(1.5 * t_max_) + "]");
      }
    }
    const auto n = static_cast<Eigen::Index>(p.size());
    const auto k = static_cast<Eigen::Index>(width());
    ImputationDistribution out;
    out.times = p.times;
    out.observed = p.observed;
    out.z_mu.resize(n, k);
    out.z_sigma.resize(n, k);
    RunningState s = initial_state(1);
    for (Eigen::Index i = 0; i < n; ++i) {
      StepOutput o = step(s, standardize_row(p.values.row(i), p.observed.row(i)), p.times[static_cast<std::size_t>(i)]);
      out.z_mu.row(i) = o.z_mu;
      out.z_sigma.row(i) = o.z_sigma;
      s = std::move(o.state);
    }
    finish(p.values, out);
    return out;
  }

  /// Fills original-unit fields and X from z_mu, z_sigma and the observations.
  void finish(const Array& values, ImputationDistribution& out) const {
    const Eigen::Index n = out.z_mu.rows(), k = out.z_mu.cols();
    out.mu.resize(n, k);
    out.sigma.resize(n, k);
    out.x.resize(n, k);
    out.z_x.resize(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < k; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        out.mu(i, j) = standardizer_.inverse(jj, out.z_mu(i, j));
        out.sigma(i, j) = out.z_sigma(i, j) * standardizer_.sd[jj];
        if (out.observed(i, j)) {
          out.x(i, j) = values(i, j);
          out.z_x(i, j) = standardizer_.forward(jj, values(i, j));
        } else {
          out.x(i, j) = out.mu(i, j);
          out.z_x(i, j) = out.z_mu(i, j);
        }
      }
    }
  }

  struct Unrolled {
    std::vector<Var> h;
    std::vector<Var> mu;
  };

  Unrolled unroll(Tape& t, const SequenceBatch& b) const {
    Unrolled u;
    tensor::LstmState s = lstm.zero_state(t, b.batch());
    for (const Array& in : b.inputs) {
      s = advance(t, s, t.constant_ref(in));
      u.h.push_back(s.h);
      u.mu.push_back(mean_head(t, s.h));
    }
    return u;
  }

  /// Masked mean squared error of the mean head, averaged over supervised cells.
  Var mean_loss(Tape& t, const SequenceBatch& b) const {
    Unrolled u = unroll(t, b);
    return accumulate_loss(t, b, [&](std::size_t s) {
      Var r = tensor::sub(u.mu[s], t.constant_ref(b.targets[s]));
      return tensor::mul_const(tensor::square(r), b.weights[s]);
    });
  }

  /// Masked r^2/(2 sigma^2) + sigma^2/2 through the whole network, averaged over supervised cells.
  Var sigma_loss(Tape& t, const SequenceBatch& b) const {
    Unrolled u = unroll(t, b);
    return accumulate_loss(t, b, [&](std::size_t s) {
      Var r = tensor::sub(u.mu[s], t.constant_ref(b.targets[s]));
      Var v = tensor::square(deviation_head(t, u.h[s]));
      Var term = tensor::add(tensor::div(tensor::square(r), tensor::scale(v, 2.0)), tensor::scale(v, 0.5));
      return tensor::mul_const(term, b.weights[s]);
    });
  }

  void save(const std::string& path) const {
    tensor::save_snapshot(path, tensor::to_named(parameters()));
    std::ofstream os(path + ".json", std::ios::trunc);
    if (!os) throw std::runtime_error("imputer: cannot write sidecar " + path + ".json");
    os << sidecar().dump(2) << '\n';
  }

  [[nodiscard]] nlohmann::json sidecar() const {
    return {{"format", "ras-imputer"},
            {"version", 1},
            {"schema", cohort::to_json(schema_)},
            {"schema_hash", cohort::schema_hash(schema_)},
            {"d", config_.embed_half_dim},
            {"hidden", config_.hidden},
            {"t_max", t_max_},
            {"sigma_floor", config_.sigma_floor},
            {"standardizer", standardizer_.to_json()},
            {"mean_trained", mean_trained},
            {"sigma_trained", sigma_trained},
            {"config", to_json(config_)}};
  }

  static Imputer load(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is) throw std::runtime_error("imputer: cannot read sidecar " + path + ".json");
    const auto j = nlohmann::json::parse(is);
    if (j.value("format", "") != "ras-imputer") throw std::runtime_error("imputer: " + path + " is not an imputer");
    auto schema = cohort::schema_from_json(j.at("schema"));
    if (cohort::schema_hash(schema) != j.at("schema_hash").get<std::string>()) {
      throw std::runtime_error("imputer: schema hash mismatch in " + path + ".json");
    }
    Imputer m(std::move(schema), imputer_config_from_json(j.at("config")), j.at("t_max").get<double>(),
              Standardizer::from_json(j.at("standardizer")));
    tensor::assign_named(tensor::load_snapshot(path), m.parameters());
    m.mean_trained = j.value("mean_trained", false);
    m.sigma_trained = j.value("sigma_trained", false);
    return m;
  }

 private:
  template <typename Term>
  Var accumulate_loss(Tape& t, const SequenceBatch& b, Term term) const {
    Var total = t.constant(Array::Zero(1, 1));
    for (std::size_t s = 0; s < b.steps(); ++s) total = tensor::add(total, tensor::sum(term(s)));
    return tensor::scale(total, 1.0 / std::max(1.0, b.weight_total));
  }

  cohort::VariableSchema schema_;
  ImputerConfig config_;
  double t_max_ = 1.0;
  Standardizer standardizer_;
};

struct ImputerHistory {
  std::vector<double> train_loss;       // mean phase, per epoch
  std::vector<double> validation_loss;  // held-out masked MSE; entry 0 is before training
  std::vector<double> sigma_loss;       // sigma phase, per epoch
};

namespace detail {

inline std::vector<StandardizedRecord> standardize_all(const cohort::Cohort& c, const Standardizer& st) {
  std::vector<StandardizedRecord> out;
  out.reserve(c.size());
  for (const auto& p : c) out.push_back(standardize(p, st));
  return out;
}

/// Groups record indices into batches of similar length, in shuffled batch order.
template <typename Rng>
std::vector<std::vector<std::size_t>> length_batches(const std::vector<StandardizedRecord>& recs,
                                                     std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(recs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> key(recs.size());
  std::uniform_real_distribution<double> jitter(0.0, 4.0);
  for (std::size_t i = 0; i < recs.size(); ++i) key[i] = static_cast<double>(recs[i].times.size()) + jitter(rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

inline SequenceBatch gather(const std::vector<StandardizedRecord>& recs, const std::vector<MaskPlan>& plans,
                            const std::vector<std::size_t>& idx, const Imputer& m) {
  std::vector<const StandardizedRecord*> r;
  std::vector<const Mask*> mk;
  for (std::size_t i : idx) {
    r.push_back(&recs[i]);
    mk.push_back(&plans[i].M);
  }
  return make_sequence_batch(r, mk, m.embed_half_dim(), m.t_max());
}

template <typename Rng>
std::vector<MaskPlan> draw_plans(const cohort::Cohort& c, const cohort::VariableSchema& schema, double fraction,
                                 Rng& rng) {
  std::vector<MaskPlan> plans;
  plans.reserve(c.size());
  for (const auto& p : c) plans.push_back(draw_mask_plan(p, schema, fraction, rng));
  return plans;
}

inline double masked_mse(const Imputer& m, const std::vector<StandardizedRecord>& recs,
                         const std::vector<MaskPlan>& plans) {
  double total = 0.0, count = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < recs.size(); i += m.config().batch_size) {
    idx.clear();
    for (std::size_t j = i; j < std::min(recs.size(), i + m.config().batch_size); ++j) idx.push_back(j);
    SequenceBatch b = gather(recs, plans, idx, m);
    if (b.weight_total == 0.0) continue;
    Tape t(false);
    total += m.mean_loss(t, b).scalar() * b.weight_total;
    count += b.weight_total;
  }
  return count > 0.0 ? total / count : 0.0;
}

}  // namespace detail

/// Largest timestamp in a cohort, at least 1 hour.
inline double cohort_t_max(const cohort::Cohort& c) {
  double t = 1.0;
  for (const auto& p : c) {
    if (!p.times.empty()) t = std::max(t, p.times.back());
  }
  return t;
}

/// First phase: fits embedding, LSTM and mean head on masked observed labs.
/// When `validation` is given, its masked MSE is logged before and after every epoch.
inline Imputer train_imputer_mean(const cohort::Cohort& train, const cohort::VariableSchema& schema,
                                  const ImputerConfig& config, const cohort::Cohort* validation = nullptr,
                                  ImputerHistory* history = nullptr) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train_imputer_mean: empty cohort");
  bool any_lab = false;
  for (const auto& p : train) {
    p.validate(schema);
    for (std::size_t j : schema.lab_indices()) any_lab = any_lab || p.observed.col(static_cast<Eigen::Index>(j)).any();
  }
  if (!any_lab) throw std::invalid_argument("train_imputer_mean: cohort has no observed lab values");

  Imputer m(schema, config, cohort_t_max(train), Standardizer::fit(train, schema.size()));
  const auto recs = detail::standardize_all(train, m.standardizer());
  std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ULL);

  std::vector<StandardizedRecord> val_recs;
  std::vector<MaskPlan> val_plans;
  if (validation && !validation->empty()) {
    val_recs = detail::standardize_all(*validation, m.standardizer());
    std::mt19937_64 vrng(config.seed + 1);
    val_plans = detail::draw_plans(*validation, schema, config.mask_fraction, vrng);
    if (history) history->validation_loss.push_back(detail::masked_mse(m, val_recs, val_plans));
  }

  auto params = m.trunk_parameters();
  tensor::Optimizer opt(config.learning_rate);
  for (std::size_t epoch = 0; epoch < config.mean_epochs; ++epoch) {
    const auto plans = detail::draw_plans(train, schema, config.mask_fraction, rng);
    double loss_sum = 0.0, weight_sum = 0.0;
    for (const auto& idx : detail::length_batches(recs, config.batch_size, rng)) {
      SequenceBatch b = detail::gather(recs, plans, idx, m);
      if (b.weight_total == 0.0) continue;
      Tape t(true);
      Var loss = m.mean_loss(t, b);
      t.backward(loss);
      tensor::zero_grads(params);
      t.accumulate(params);
      if (config.clip_norm > 0.0) tensor::clip_grad_norm(params, config.clip_norm);
      opt.step(params);
      loss_sum += loss.scalar() * b.weight_total;
      weight_sum += b.weight_total;
    }
    if (history) {
      history->train_loss.push_back(weight_sum > 0.0 ? loss_sum / weight_sum : 0.0);
      if (!val_recs.empty()) history->validation_loss.push_back(detail::masked_mse(m, val_recs, val_plans));
    }
  }
  m.mean_trained = true;
  return m;
}

/// Frozen-trunk rows for the sigma phase: LSTM states, residuals mu - z, supervision weights.
struct SigmaRows {
  Array states;
  Array residuals;
  Array weights;
};

inline SigmaRows collect_sigma_rows(const Imputer& m, const std::vector<StandardizedRecord>& recs,
                                    const std::vector<MaskPlan>& plans) {
  std::vector<Eigen::Index> keep;
  std::vector<Array> hs, rs, ws;
  Eigen::Index total = 0;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < recs.size(); i += m.config().batch_size) {
    idx.clear();
    for (std::size_t j = i; j < std::min(recs.size(), i + m.config().batch_size); ++j) idx.push_back(j);
    SequenceBatch b = detail::gather(recs, plans, idx, m);
    Tape t(false);
    auto u = m.unroll(t, b);
    for (std::size_t s = 0; s < b.steps(); ++s) {
      const Array& w = b.weights[s];
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        if (w.row(r).sum() == 0.0) continue;
        hs.push_back(u.h[s].value().row(r));
        rs.push_back(u.mu[s].value().row(r) - b.targets[s].row(r));
        ws.push_back(w.row(r));
        ++total;
      }
    }
  }
  SigmaRows out;
  const auto H = static_cast<Eigen::Index>(m.config().hidden);
  const auto k = static_cast<Eigen::Index>(m.width());
  out.states.resize(total, H);
  out.residuals.resize(total, k);
  out.weights.resize(total, k);
  for (Eigen::Index r = 0; r < total; ++r) {
    out.states.row(r) = hs[static_cast<std::size_t>(r)];
    out.residuals.row(r) = rs[static_cast<std::size_t>(r)];
    out.weights.row(r) = ws[static_cast<std::size_t>(r)];
  }
  return out;
}

/// Mean over weighted cells of r^2/(2 sigma^2) + sigma^2/2 with sigma from the head on fixed states.
inline Var sigma_head_loss(Tape& t, const Imputer& m, const Array& states, const Array& residuals,
                           const Array& weights) {
  Var v = tensor::square(m.deviation_head(t, t.constant_ref(states)));
  Array r2 = residuals.array().square().matrix();
  Var term = tensor::add(tensor::div(t.constant(std::move(r2)), tensor::scale(v, 2.0)), tensor::scale(v, 0.5));
  return tensor::scale(tensor::sum(tensor::mul_const(term, weights)), 1.0 / std::max(1.0, weights.sum()));
}

/// Second phase: fits only w_sigma and b_sigma; every other parameter is left bit-identical.
inline void train_imputer_sigma(const cohort::Cohort& train, Imputer& m, ImputerHistory* history = nullptr) {
  if (!m.mean_trained) throw std::logic_error("train_imputer_sigma: mean phase has not run");
  if (train.empty()) throw std::invalid_argument("train_imputer_sigma: empty cohort");
  const auto& cfg = m.config();
  const auto recs = detail::standardize_all(train, m.standardizer());
  std::mt19937_64 rng(cfg.seed ^ 0x5167A11ULL);

  SigmaRows rows;
  for (std::size_t p = 0; p < cfg.sigma_plans; ++p) {
    SigmaRows part = collect_sigma_rows(m, recs, detail::draw_plans(train, m.schema(), cfg.mask_fraction, rng));
    const Eigen::Index old = rows.states.rows();
    if (old == 0) {
      rows = std::move(part);
      continue;
    }
    rows.states.conservativeResize(old + part.states.rows(), Eigen::NoChange);
    rows.residuals.conservativeResize(old + part.states.rows(), Eigen::NoChange);
    rows.weights.conservativeResize(old + part.states.rows(), Eigen::NoChange);
    rows.states.bottomRows(part.states.rows()) = part.states;
    rows.residuals.bottomRows(part.states.rows()) = part.residuals;
    rows.weights.bottomRows(part.states.rows()) = part.weights;
  }
  if (rows.states.rows() == 0) throw std::invalid_argument("train_imputer_sigma: no maskable lab values");

  // Start from sigma = 1 everywhere, inside the ReLU's active region. Random
  // initial weights put some cells near the floor, where r^2/sigma^3 gradients
  // swamp the Adam moments and the sparse lab columns blow up.
  m.sigma_head.weight.value.setZero();
  m.sigma_head.bias.value.setOnes();
  auto params = m.sigma_parameters();
  tensor::Optimizer opt(cfg.sigma_learning_rate);
  const Eigen::Index n = rows.states.rows();
  const Eigen::Index bs = std::max<Eigen::Index>(256, static_cast<Eigen::Index>(cfg.batch_size) * 16);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (std::size_t epoch = 0; epoch < cfg.sigma_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, w_sum = 0.0;
    for (Eigen::Index start = 0; start < n; start += bs) {
      const Eigen::Index len = std::min(bs, n - start);
      Array S(len, rows.states.cols()), R(len, rows.residuals.cols()), W(len, rows.weights.cols());
      for (Eigen::Index r = 0; r < len; ++r) {
        const Eigen::Index src = order[static_cast<std::size_t>(start + r)];
        S.row(r) = rows.states.row(src);
        R.row(r) = rows.residuals.row(src);
        W.row(r) = rows.weights.row(src);
      }
      Tape t(true);
      Var loss = sigma_head_loss(t, m, S, R, W);
      t.backward(loss);
      tensor::zero_grads(params);
      t.accumulate(params);
      opt.step(params);
      loss_sum += loss.scalar() * W.sum();
      w_sum += W.sum();
    }
    if (history) history->sigma_loss.push_back(w_sum > 0.0 ? loss_sum / w_sum : 0.0);
  }
  m.sigma_trained = true;
}

struct MaskedEvaluation {
  std::size_t count = 0;
  double rmse = 0.0;           // standardized units
  double baseline_rmse = 0.0;  // training-mean predictor, standardized units
  double coverage = 0.0;       // fraction with |z - mu| <= 2 sigma
};

/// Scores the imputer on cells hidden by freshly drawn mask plans.
inline MaskedEvaluation evaluate_masked(const Imputer& m, const cohort::Cohort& c, double fraction,
                                        std::uint64_t seed) {
  const auto recs = detail::standardize_all(c, m.standardizer());
  std::mt19937_64 rng(seed);
  const auto plans = detail::draw_plans(c, m.schema(), fraction, rng);
  MaskedEvaluation e;
  double se = 0.0, se0 = 0.0, covered = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < recs.size(); i += m.config().batch_size) {
    idx.clear();
    for (std::size_t j = i; j < std::min(recs.size(), i + m.config().batch_size); ++j) idx.push_back(j);
    SequenceBatch b = detail::gather(recs, plans, idx, m);
    Tape t(false);
    auto u = m.unroll(t, b);
    for (std::size_t s = 0; s < b.steps(); ++s) {
      const Array& mu = u.mu[s].value();
      const Array sg = m.deviation_head(t, u.h[s]).value();
      for (Eigen::Index r = 0; r < mu.rows(); ++r) {
        for (Eigen::Index j = 0; j < mu.cols(); ++j) {
          if (b.weights[s](r, j) == 0.0) continue;
          const double z = b.targets[s](r, j);
          const double d = mu(r, j) - z;
          se += d * d;
          se0 += z * z;
          if (std::abs(d) <= 2.0 * sg(r, j)) covered += 1.0;
          ++e.count;
        }
      }
    }
  }
  if (e.count > 0) {
    const auto n = static_cast<double>(e.count);
    e.rmse = std::sqrt(se / n);
    e.baseline_rmse = std::sqrt(se0 / n);
    e.coverage = covered / n;
  }
  return e;
}

/// Both phases in sequence.
inline Imputer train_imputer(const cohort::Cohort& train, const cohort::VariableSchema& schema,
                             const ImputerConfig& config, const cohort::Cohort* validation = nullptr,
                             ImputerHistory* history = nullptr) {
  Imputer m = train_imputer_mean(train, schema, config, validation, history);
  train_imputer_sigma(train, m, history);
  return m;
}

}  // namespace ras::imputer
