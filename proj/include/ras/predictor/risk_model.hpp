#pragma once

// Hourly sepsis-risk model over imputed, standardized collections.
//
//   e_i = w_e [x_i ; e^t_i] + b_e      h_i = LSTM(e_i, h_{i-1})      p_i = sigmoid(w_s h_i + b_s)
//
// Dropout sits only in front of the head, so the recurrent state never
// depends on the dropout draw and MC-dropout passes share one LSTM unroll.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ras/cohort/record.hpp"
#include "ras/cohort/schema.hpp"
#include "ras/imputer/imputer.hpp"
#include "ras/imputer/time_embedding.hpp"
#include "ras/tensor/layers.hpp"
#include "ras/tensor/ops.hpp"
#include "ras/tensor/snapshot.hpp"

namespace ras::predictor {

using tensor::Array;
using tensor::Parameter;
using tensor::Tape;
using tensor::Var;

enum class TrainingMode { ras_n, ras_l, ras };

inline std::string to_string(TrainingMode m) {
  switch (m) {
    case TrainingMode::ras_n: return "ras_n";
    case TrainingMode::ras_l: return "ras_l";
    case TrainingMode::ras: return "ras";
  }
  return "?";
}

inline TrainingMode training_mode_from_string(const std::string& s) {
  if (s == "ras_n") return TrainingMode::ras_n;
  if (s == "ras_l") return TrainingMode::ras_l;
  if (s == "ras") return TrainingMode::ras;
  throw std::invalid_argument("unknown training mode '" + s + "' (expected ras_n, ras_l or ras)");
}

struct AdversarialConfig {
  double alpha = 0.5;
  double s_adv = 1e-3;
  std::size_t n_adv = 15;
  double learning_rate = 1e-4;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
      throw std::invalid_argument("adversarial: alpha must lie in [0,1], got " + std::to_string(alpha));
    }
    if (!(s_adv >= 0.0) || !std::isfinite(s_adv)) throw std::invalid_argument("adversarial: s_adv must be >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("adversarial: learning rate must be positive");
    }
  }
};

struct PredictorConfig {
  std::size_t embed_half_dim = 32;
  std::size_t hidden = 64;
  double dropout = 0.2;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double clip_norm = 5.0;
  std::uint64_t seed = 23;
  AdversarialConfig adversarial;
  std::size_t log_gamma_points = 32;
  std::size_t log_gamma_restarts = 3;

  void validate() const {
    if (embed_half_dim == 0 || hidden == 0) throw std::invalid_argument("predictor: zero layer size");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("predictor: dropout must lie in [0,1)");
    if (batch_size == 0) throw std::invalid_argument("predictor: batch_size must be positive");
    adversarial.validate();
  }
};

inline nlohmann::json to_json(const PredictorConfig& c) {
  return {{"embed_half_dim", c.embed_half_dim},
          {"hidden", c.hidden},
          {"dropout", c.dropout},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"clip_norm", c.clip_norm},
          {"seed", c.seed},
          {"alpha", c.adversarial.alpha},
          {"s_adv", c.adversarial.s_adv},
          {"n_adv", c.adversarial.n_adv},
          {"learning_rate", c.adversarial.learning_rate},
          {"log_gamma_points", c.log_gamma_points},
          {"log_gamma_restarts", c.log_gamma_restarts}};
}

inline PredictorConfig predictor_config_from_json(const nlohmann::json& j) {
  PredictorConfig c;
  c.embed_half_dim = j.value("embed_half_dim", c.embed_half_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.dropout = j.value("dropout", c.dropout);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.seed = j.value("seed", c.seed);
  c.adversarial.alpha = j.value("alpha", c.adversarial.alpha);
  c.adversarial.s_adv = j.value("s_adv", c.adversarial.s_adv);
  c.adversarial.n_adv = j.value("n_adv", c.adversarial.n_adv);
  c.adversarial.learning_rate = j.value("learning_rate", c.adversarial.learning_rate);
  c.log_gamma_points = j.value("log_gamma_points", c.log_gamma_points);
  c.log_gamma_restarts = j.value("log_gamma_restarts", c.log_gamma_restarts);
  c.validate();
  return c;
}

/// One admission as the predictor sees it: standardized imputed values and
/// the effective deviation (0 where observed).
struct Sequence {
  std::string id;
  std::vector<double> times;
  Array x;
  Array sigma;
  std::vector<std::uint8_t> labels;

  [[nodiscard]] std::size_t size() const noexcept { return times.size(); }
};

inline Sequence make_sequence(const cohort::PatientRecord& p, const imputer::ImputationDistribution& d) {
  return {p.id, p.times, d.z_x, d.effective_z_sigma(), p.labels};
}

inline std::vector<Sequence> prepare_sequences(const cohort::Cohort& c, const imputer::Imputer& imp) {
  std::vector<Sequence> out;
  out.reserve(c.size());
  for (const auto& p : c) out.push_back(make_sequence(p, imp.impute(p)));
  return out;
}

enum class DropoutMode { off, on };

class RiskModel {
 public:
  struct RunningState {
    Array h;
    Array c;
  };

  /// One recorded LSTM step with the intermediates tangent propagation needs.
  struct StepNodes {
    tensor::LstmState state;
    tensor::LstmCell::Gates gates;
    Var tanh_c;
  };

  RiskModel() = default;

  RiskModel(std::size_t k, PredictorConfig config, double t_max) : config_(config), k_(k), t_max_(t_max) {
    config_.validate();
    if (k == 0) throw std::invalid_argument("predictor: zero input width");
    if (!(t_max > 0.0)) throw std::invalid_argument("predictor: T_max must be positive");
    const auto d = static_cast<Eigen::Index>(config_.embed_half_dim);
    const auto H = static_cast<Eigen::Index>(config_.hidden);
    std::mt19937_64 rng(config_.seed);
    embed = tensor::Dense("predictor.embed", static_cast<Eigen::Index>(k) + 2 * d, d, rng);
    lstm = tensor::LstmCell("predictor.lstm", d, H, rng);
    head = tensor::Dense("predictor.head", H, 1, rng);
  }

  tensor::Dense embed;
  tensor::LstmCell lstm;
  tensor::Dense head;
  TrainingMode mode = TrainingMode::ras_n;
  bool trained = false;

  [[nodiscard]] const PredictorConfig& config() const noexcept { return config_; }
  [[nodiscard]] std::size_t width() const noexcept { return k_; }
  [[nodiscard]] double t_max() const noexcept { return t_max_; }
  [[nodiscard]] Eigen::Index hidden_size() const noexcept { return static_cast<Eigen::Index>(config_.hidden); }
  [[nodiscard]] double dropout_rate() const noexcept { return config_.dropout; }

  std::vector<Parameter*> parameters() {
    return {&embed.weight, &embed.bias, &lstm.weight, &lstm.bias, &head.weight, &head.bias};
  }
  std::vector<const Parameter*> parameters() const {
    return {&embed.weight, &embed.bias, &lstm.weight, &lstm.bias, &head.weight, &head.bias};
  }

  [[nodiscard]] Array time_rows(double t_hours, Eigen::Index rows) const {
    return imputer::time_embed(t_hours, config_.embed_half_dim, t_max_).replicate(rows, 1);
  }

  StepNodes advance(Tape& t, const tensor::LstmState& prev, const Var& x, const Array& time_embedding) const {
    if (x.cols() != static_cast<Eigen::Index>(k_)) {
      throw std::invalid_argument("predictor: input width " + std::to_string(x.cols()) + " != " + std::to_string(k_));
    }
    Var e = embed.forward(t, tensor::concat_cols({x, t.constant(time_embedding)}));
    StepNodes s;
    s.gates = lstm.gates(t, e, prev);
    Var c = tensor::add(tensor::mul(s.gates.f, prev.c), tensor::mul(s.gates.i, s.gates.g));
    s.tanh_c = tensor::tanh(c);
    s.state = {tensor::mul(s.gates.o, s.tanh_c), c};
    return s;
  }

  /// p = sigmoid(w_s (h * mask) + b_s); `mask` may be null for the deterministic pass.
  Var risk(Tape& t, const Var& h, const Array* mask) const {
    return tensor::sigmoid(head.forward(t, mask ? tensor::mul_const(h, *mask) : h));
  }

  /// Directional derivative of the risk along `delta` (a change of this step's input only).
  Var risk_tangent(Tape& t, const tensor::LstmState& prev, const StepNodes& s, const Var& p, const Var& delta,
                   const Array* mask) const {
    using namespace tensor;
    const Eigen::Index B = delta.rows();
    const Eigen::Index H = hidden_size();
    const auto D = static_cast<Eigen::Index>(2 * config_.embed_half_dim);
    Var de = matmul(concat_cols({delta, t.constant(Array::Zero(B, D))}), t.bind(embed.weight));
    Var dz = matmul(concat_cols({de, t.constant(Array::Zero(B, H))}), t.bind(lstm.weight));
    auto dsig = [](const Var& g) { return mul(g, affine(g, -1.0, 1.0)); };
    Var di = mul(dsig(s.gates.i), slice_cols(dz, 0, H));
    Var df = mul(dsig(s.gates.f), slice_cols(dz, H, H));
    Var dg = mul(affine(square(s.gates.g), -1.0, 1.0), slice_cols(dz, 2 * H, H));
    Var dout = mul(dsig(s.gates.o), slice_cols(dz, 3 * H, H));
    Var dc = add(add(mul(df, prev.c), mul(di, s.gates.g)), mul(s.gates.i, dg));
    Var dh = add(mul(dout, s.tanh_c), mul(mul(s.gates.o, affine(square(s.tanh_c), -1.0, 1.0)), dc));
    Var du = matmul(mask ? mul_const(dh, *mask) : dh, t.bind(head.weight));
    return mul(dsig(p), du);
  }

  [[nodiscard]] RunningState initial_state(Eigen::Index rows = 1) const {
    return {Array::Zero(rows, hidden_size()), Array::Zero(rows, hidden_size())};
  }

  /// Inverted-dropout masks for the head input, one row per pass.
  template <typename Rng>
  Array head_masks(Eigen::Index passes, Rng& rng) const {
    return tensor::dropout_mask(passes, hidden_size(), config_.dropout, rng);
  }

  struct StepResult {
    RunningState state;
    Array risk;  // rows x 1, dropout off
  };

  [[nodiscard]] StepResult step(const RunningState& prev, const Array& x, double t_hours) const {
    Tape t(false);
    StepNodes s = advance(t, {t.constant_ref(prev.h), t.constant_ref(prev.c)}, t.constant_ref(x), time_rows(t_hours, x.rows()));
    return {{s.state.h.value(), s.state.c.value()}, risk(t, s.state.h, nullptr).value()};
  }

  /// Risk of each hidden-state row under each head mask row: rows of `h` broadcast against `masks`.
  [[nodiscard]] Array risk_under_masks(const Array& h, const Array& masks) const {
    if (h.rows() != 1 && h.rows() != masks.rows()) throw std::invalid_argument("risk_under_masks: row mismatch");
    Array out(masks.rows(), 1);
    const Array& w = head.weight.value;
    const double b = head.bias.value(0, 0);
    for (Eigen::Index r = 0; r < masks.rows(); ++r) {
      const auto hr = h.row(h.rows() == 1 ? 0 : r);
      double u = b;
      for (Eigen::Index j = 0; j < masks.cols(); ++j) u += hr(j) * masks(r, j) * w(j, 0);
      out(r, 0) = tensor::sigmoid_scalar(u);
    }
    return out;
  }

  /// Gradient of each row's risk w.r.t. its input row at one step. `masks` (rows x H) may be null.
  [[nodiscard]] Array input_gradient(const RunningState& prev, const Array& x, const Array& time_embedding,
                                     const Array* masks, Array* risk_out = nullptr) const {
    Tape t(false);
    Var xin = t.input(x);
    StepNodes s = advance(t, {t.constant_ref(prev.h), t.constant_ref(prev.c)}, xin, time_embedding);
    Var p = risk(t, s.state.h, masks);
    t.backward(tensor::sum(p));
    if (risk_out) *risk_out = p.value();
    return t.grad(xin);
  }

  [[nodiscard]] Array input_gradient(const RunningState& prev, const Array& x, double t_hours, const Array* masks,
                                     Array* risk_out = nullptr) const {
    return input_gradient(prev, x, time_rows(t_hours, x.rows()), masks, risk_out);
  }

  /// State after consuming collections [0, upto) of `x`.
  [[nodiscard]] RunningState prefix_state(const Array& x, const std::vector<double>& times, std::size_t upto) const {
    RunningState s = initial_state(1);
    for (std::size_t i = 0; i < upto; ++i) s = step(s, x.row(static_cast<Eigen::Index>(i)), times[i]).state;
    return s;
  }

  void save(const std::string& path, const cohort::VariableSchema& schema) const {
    tensor::save_snapshot(path, tensor::to_named(parameters()));
    std::ofstream os(path + ".json", std::ios::trunc);
    if (!os) throw std::runtime_error("predictor: cannot write sidecar " + path + ".json");
    nlohmann::json j = {{"format", "ras-predictor"},
                        {"version", 1},
                        {"schema_hash", cohort::schema_hash(schema)},
                        {"k", k_},
                        {"t_max", t_max_},
                        {"mode", to_string(mode)},
                        {"trained", trained},
                        {"config", to_json(config_)}};
    os << j.dump(2) << '\n';
  }

  static RiskModel load(const std::string& path, const cohort::VariableSchema* expect_schema = nullptr) {
    std::ifstream is(path + ".json");
    if (!is) throw std::runtime_error("predictor: cannot read sidecar " + path + ".json");
    const auto j = nlohmann::json::parse(is);
    if (j.value("format", "") != "ras-predictor") throw std::runtime_error("predictor: " + path + " is not a predictor");
    if (expect_schema && j.at("schema_hash").get<std::string>() != cohort::schema_hash(*expect_schema)) {
      throw std::runtime_error("predictor: schema hash of " + path + " does not match the loaded schema");
    }
    RiskModel m(j.at("k").get<std::size_t>(), predictor_config_from_json(j.at("config")), j.at("t_max").get<double>());
    tensor::assign_named(tensor::load_snapshot(path), m.parameters());
    m.mode = training_mode_from_string(j.at("mode").get<std::string>());
    m.trained = j.value("trained", false);
    return m;
  }

 private:
  PredictorConfig config_;
  std::size_t k_ = 0;
  double t_max_ = 1.0;
};

/// Per-collection risks. With dropout on, each collection draws its own head mask from `seed`.
inline std::vector<double> predict_risk(const RiskModel& m, const Array& x, const std::vector<double>& times,
                                        DropoutMode mode = DropoutMode::off, std::uint64_t seed = 0) {
  if (static_cast<std::size_t>(x.rows()) != times.size()) {
    throw std::invalid_argument("predict_risk: " + std::to_string(x.rows()) + " collections but " +
                                std::to_string(times.size()) + " timestamps");
  }
  std::mt19937_64 rng(seed);
  std::vector<double> out;
  out.reserve(times.size());
  RiskModel::RunningState s = m.initial_state(1);
  for (std::size_t i = 0; i < times.size(); ++i) {
    auto r = m.step(s, x.row(static_cast<Eigen::Index>(i)), times[i]);
    if (mode == DropoutMode::on) {
      out.push_back(m.risk_under_masks(r.state.h, m.head_masks(1, rng))(0, 0));
    } else {
      out.push_back(r.risk(0, 0));
    }
    s = std::move(r.state);
  }
  return out;
}

inline std::vector<double> predict_risk(const RiskModel& m, const Sequence& s, DropoutMode mode = DropoutMode::off,
                                        std::uint64_t seed = 0) {
  return predict_risk(m, s.x, s.times, mode, seed);
}

/// Gradient of the risk at collection `index` w.r.t. that collection's inputs; only the latest collection is allowed.
inline Array input_gradient(const RiskModel& m, const Array& x, const std::vector<double>& times, std::size_t index,
                            const Array* mask = nullptr) {
  if (times.empty() || static_cast<std::size_t>(x.rows()) != times.size()) {
    throw std::invalid_argument("input_gradient: empty history or length mismatch");
  }
  if (index != times.size() - 1) {
    throw std::invalid_argument("input_gradient: collection " + std::to_string(index) +
                                " is not the current collection " + std::to_string(times.size() - 1));
  }
  const auto prev = m.prefix_state(x, times, index);
  return m.input_gradient(prev, x.row(static_cast<Eigen::Index>(index)), times[index], mask);
}

/// The risk at one decision point as a differentiable function of that collection's inputs.
struct RiskPoint {
  const RiskModel* model = nullptr;
  RiskModel::RunningState prev;
  double t_hours = 0.0;
  Array mask;  // 1 x H head mask; empty means dropout off

  /// Values (rows x 1) at each row of X; fills `grad` (rows x k) when non-null.
  Array evaluate(const Array& X, Array* grad) const {
    const Eigen::Index B = X.rows();
    RiskModel::RunningState p{prev.h.replicate(B, 1), prev.c.replicate(B, 1)};
    Array masks;
    const Array* mp = nullptr;
    if (mask.size() > 0) {
      masks = mask.replicate(B, 1);
      mp = &masks;
    }
    if (!grad) {
      Tape t(false);
      auto s = model->advance(t, {t.constant_ref(p.h), t.constant_ref(p.c)}, t.constant_ref(X), model->time_rows(t_hours, B));
      return model->risk(t, s.state.h, mp).value();
    }
    Array values;
    *grad = model->input_gradient(p, X, t_hours, mp, &values);
    return values;
  }
};

/// |f(x + delta) - f(x) - delta . grad f(x)| for a scalar field with an `evaluate` member.
template <typename Field>
double adversarial_residual(const Field& f, const Array& x, const Array& delta, const Array& sigma) {
  if (x.rows() != 1 || delta.rows() != 1 || sigma.rows() != 1 || delta.cols() != x.cols() || sigma.cols() != x.cols()) {
    throw std::invalid_argument("adversarial_residual: x, delta and sigma must be matching single rows");
  }
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    if (std::abs(delta(0, j)) > 2.0 * sigma(0, j) * (1.0 + 1e-12)) {
      throw std::invalid_argument("adversarial_residual: delta[" + std::to_string(j) + "]=" +
                                  std::to_string(delta(0, j)) + " outside the 2-sigma box");
    }
  }
  Array g0;
  const double f0 = f.evaluate(x, &g0)(0, 0);
  const double f1 = f.evaluate(x + delta, nullptr)(0, 0);
  return std::abs(f1 - f0 - (delta.array() * g0.array()).sum());
}

struct LinearityOptions {
  std::size_t restarts = 10;
  std::size_t iterations = 20;
  double step_fraction = 0.25;  // sign-step length as a fraction of the box width 4 sigma
  std::uint64_t seed = 1;
};

/// Estimate of the largest Taylor residual over the box |delta| <= 2 sigma by
/// projected sign ascent from uniformly drawn starts.
template <typename Field>
double local_linearity(const Field& f, const Array& x, const Array& sigma, const LinearityOptions& opt = {}) {
  if (x.rows() != 1 || sigma.rows() != 1 || sigma.cols() != x.cols()) {
    throw std::invalid_argument("local_linearity: x and sigma must be matching single rows");
  }
  for (Eigen::Index j = 0; j < sigma.cols(); ++j) {
    if (!(sigma(0, j) >= 0.0) || !std::isfinite(sigma(0, j))) {
      throw std::invalid_argument("local_linearity: sigma must be finite and non-negative");
    }
  }
  if (sigma.maxCoeff() == 0.0 || opt.restarts == 0) return 0.0;
  const Eigen::Index R = static_cast<Eigen::Index>(opt.restarts), k = x.cols();
  Array g0;
  const double f0 = f.evaluate(x, &g0)(0, 0);
  const Array box = 2.0 * sigma;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Array delta(R, k);
  for (Eigen::Index r = 0; r < R; ++r) {
    for (Eigen::Index j = 0; j < k; ++j) delta(r, j) = u(rng) * box(0, j);
  }
  const Array X0 = x.replicate(R, 1);
  const Array G0 = g0.replicate(R, 1);
  double best = 0.0;
  for (std::size_t it = 0;; ++it) {
    Array G;
    const Array v = f.evaluate(X0 + delta, it < opt.iterations ? &G : nullptr);
    const Array res = v.array() - f0 - (delta.array() * G0.array()).rowwise().sum();
    best = std::max(best, res.cwiseAbs().maxCoeff());
    if (it == opt.iterations) break;
    for (Eigen::Index r = 0; r < R; ++r) {
      const double sgn = res(r, 0) > 0.0 ? 1.0 : (res(r, 0) < 0.0 ? -1.0 : 0.0);
      for (Eigen::Index j = 0; j < k; ++j) {
        const double dir = sgn * (G(r, j) - G0(r, j));
        const double stepj = opt.step_fraction * 2.0 * box(0, j);
        double d = delta(r, j) + (dir > 0.0 ? stepj : (dir < 0.0 ? -stepj : 0.0));
        delta(r, j) = std::clamp(d, -box(0, j), box(0, j));
      }
    }
  }
  return best;
}

}  // namespace ras::predictor
