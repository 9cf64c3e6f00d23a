#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ras/tensor/ops.hpp"
#include "ras/tensor/tape.hpp"

namespace ras::tensor {

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
template <typename Rng>
Array init_uniform(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Array a(rows, cols);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
  return a;
}

struct Dense {
  Parameter weight;  // [in, out]
  Parameter bias;    // [1, out]

  Dense() = default;
  template <typename Rng>
  Dense(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng)
      : weight(name + ".weight", init_uniform(in, out, in, rng)),
        bias(name + ".bias", init_uniform(1, out, in, rng)) {}

  [[nodiscard]] Eigen::Index in_features() const { return weight.value.rows(); }
  [[nodiscard]] Eigen::Index out_features() const { return weight.value.cols(); }

  Var forward(Tape& t, const Var& x) const {
    return dense_forward(x, t.bind(weight), t.bind(bias));
  }

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
  std::vector<const Parameter*> parameters() const { return {&weight, &bias}; }
};

struct LstmState {
  Var h;
  Var c;
};

/// Gate layout along the 4H axis: input, forget, cell candidate, output.
struct LstmCell {
  Parameter weight;  // [in + H, 4H]
  Parameter bias;    // [1, 4H]

  LstmCell() = default;
  template <typename Rng>
  LstmCell(const std::string& name, Eigen::Index in, Eigen::Index hidden, Rng& rng)
      : weight(name + ".weight", init_uniform(in + hidden, 4 * hidden, in + hidden, rng)),
        bias(name + ".bias", init_uniform(1, 4 * hidden, in + hidden, rng)) {}

  [[nodiscard]] Eigen::Index hidden_size() const { return weight.value.cols() / 4; }
  [[nodiscard]] Eigen::Index input_size() const { return weight.value.rows() - hidden_size(); }

  LstmState zero_state(Tape& t, Eigen::Index batch) const {
    return {t.constant(Array::Zero(batch, hidden_size())),
            t.constant(Array::Zero(batch, hidden_size()))};
  }

  /// Pre-activations and gates of one step, exposed for tangent propagation.
  struct Gates {
    Var i, f, g, o;
  };

  Gates gates(Tape& t, const Var& x, const LstmState& s) const {
    check(x, s);
    const Eigen::Index H = hidden_size();
    Var z = dense_forward(concat_cols({x, s.h}), t.bind(weight), t.bind(bias));
    return {sigmoid(slice_cols(z, 0, H)), sigmoid(slice_cols(z, H, H)),
            tanh(slice_cols(z, 2 * H, H)), sigmoid(slice_cols(z, 3 * H, H))};
  }

  LstmState step(Tape& t, const Var& x, const LstmState& s) const {
    Gates gt = gates(t, x, s);
    Var c = add(mul(gt.f, s.c), mul(gt.i, gt.g));
    Var h = mul(gt.o, tanh(c));
    return {h, c};
  }

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
  std::vector<const Parameter*> parameters() const { return {&weight, &bias}; }

 private:
  void check(const Var& x, const LstmState& s) const {
    const Eigen::Index H = hidden_size();
    if (x.cols() != input_size()) {
      throw std::invalid_argument("lstm_step: input width " + std::to_string(x.cols()) +
                                  " != cell input size " + std::to_string(input_size()));
    }
    if (s.h.cols() != H || s.c.cols() != H || s.h.rows() != x.rows() || s.c.rows() != x.rows()) {
      throw std::invalid_argument("lstm_step: state " + shape_of(s.h.value()) + "/" +
                                  shape_of(s.c.value()) + " does not match batch " +
                                  std::to_string(x.rows()) + " and hidden size " +
                                  std::to_string(H));
    }
  }
};

inline LstmState lstm_step(Tape& t, const LstmCell& cell, const Var& x, const LstmState& s) {
  return cell.step(t, x, s);
}

}  // namespace ras::tensor
