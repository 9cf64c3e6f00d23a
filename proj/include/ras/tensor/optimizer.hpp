#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ras/tensor/tape.hpp"

namespace ras::tensor {

enum class OptimizerMode {
  plain,     // w <- w - lr * grad
  adaptive,  // first/second moment scaling (Adam)
};

struct OptimizerState {
  double learning_rate = 1e-3;
  OptimizerMode mode = OptimizerMode::adaptive;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Array> first_moment;
  std::vector<Array> second_moment;
  std::uint64_t steps = 0;
};

class Optimizer {
 public:
  explicit Optimizer(double learning_rate, OptimizerMode mode = OptimizerMode::adaptive) {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("learning rate must be positive, got " +
                                  std::to_string(learning_rate));
    }
    state_.learning_rate = learning_rate;
    state_.mode = mode;
  }

  [[nodiscard]] const OptimizerState& state() const noexcept { return state_; }

  /// Applies one update from each parameter's accumulated grad. The parameter
  /// list must be the same (same order) on every call. Grads are left intact.
  void step(std::span<Parameter* const> params) {
    for (const Parameter* p : params) {
      if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) {
        throw std::invalid_argument("optimizer: gradient shape mismatch for " + p->name);
      }
      if (!p->grad.allFinite()) {
        throw std::domain_error("optimizer: non-finite gradient for " + p->name);
      }
    }
    ++state_.steps;
    if (state_.mode == OptimizerMode::plain) {
      for (Parameter* p : params) p->value -= state_.learning_rate * p->grad;
      return;
    }
    if (state_.first_moment.size() != params.size()) {
      state_.first_moment.clear();
      state_.second_moment.clear();
      for (const Parameter* p : params) {
        state_.first_moment.push_back(Array::Zero(p->value.rows(), p->value.cols()));
        state_.second_moment.push_back(Array::Zero(p->value.rows(), p->value.cols()));
      }
    }
    const double t = static_cast<double>(state_.steps);
    const double c1 = 1.0 - std::pow(state_.beta1, t);
    const double c2 = 1.0 - std::pow(state_.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter* p = params[k];
      Array& m = state_.first_moment[k];
      Array& v = state_.second_moment[k];
      m = state_.beta1 * m + (1.0 - state_.beta1) * p->grad;
      v = (state_.beta2 * v.array() + (1.0 - state_.beta2) * p->grad.array().square()).matrix();
      p->value.array() -= state_.learning_rate * (m.array() / c1) /
                          ((v.array() / c2).sqrt() + state_.epsilon);
    }
  }

 private:
  OptimizerState state_;
};

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

/// Rescales all grads so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
inline double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : params) p->grad *= s;
  }
  return norm;
}

}  // namespace ras::tensor
