#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ras/tensor/tape.hpp"

namespace ras::tensor {

namespace detail {

inline Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("operation on an empty Var");
  return *a.tape();
}

inline Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw std::logic_error("operands recorded on different tapes");
  return t;
}

inline void require_same_shape(const char* op, const Array& a, const Array& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " +
                                shape_of(b));
  }
}

// Elementwise unary op with derivative expressed from input and output values.
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Tape& t = tape_of(a);
  const std::size_t ia = a.id();
  Array out = a.value().unaryExpr(f);
  return t.push(std::move(out), t.requires_grad(ia), [ia, df](Tape& tp, const Array& g) {
    const Array& x = tp.value(ia);
    tp.add_grad(ia, g.cwiseProduct(x.unaryExpr(df)));
  });
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_of(av) + " x " +
                                shape_of(bv));
  }
  Array out = av * bv;
  const std::size_t ia = a.id(), ib = b.id();
  const bool need = t.requires_grad(ia) || t.requires_grad(ib);
  return t.push(std::move(out), need, [ia, ib](Tape& tp, const Array& g) {
    if (tp.requires_grad(ia)) tp.add_grad(ia, g * tp.value(ib).transpose());
    if (tp.requires_grad(ib)) tp.add_grad(ib, tp.value(ia).transpose() * g);
  });
}

/// Adds a [1 x n] row to every row of `a`.
inline Var add_row(const Var& a, const Var& row) {
  Tape& t = detail::tape_of(a, row);
  const Array& av = a.value();
  const Array& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw std::invalid_argument("add_row: bias " + shape_of(rv) + " does not fit " + shape_of(av));
  }
  Array out = av.rowwise() + rv.row(0);
  const std::size_t ia = a.id(), ir = row.id();
  const bool need = t.requires_grad(ia) || t.requires_grad(ir);
  return t.push(std::move(out), need, [ia, ir](Tape& tp, const Array& g) {
    tp.add_grad(ia, g);
    if (tp.requires_grad(ir)) tp.add_grad(ir, g.colwise().sum());
  });
}

/// input·weight + bias with the bias broadcast over rows.
inline Var dense_forward(const Var& input, const Var& weight, const Var& bias) {
  return add_row(matmul(input, weight), bias);
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Array out = a.value() + b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, const Array& g) {
                  tp.add_grad(ia, g);
                  tp.add_grad(ib, g);
                });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Array out = a.value() - b.value();
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, const Array& g) {
                  tp.add_grad(ia, g);
                  tp.add_grad(ib, -g);
                });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Array out = a.value().cwiseProduct(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, const Array& g) {
                  if (tp.requires_grad(ia)) tp.add_grad(ia, g.cwiseProduct(tp.value(ib)));
                  if (tp.requires_grad(ib)) tp.add_grad(ib, g.cwiseProduct(tp.value(ia)));
                });
}

inline Var div(const Var& a, const Var& b) {
  Tape& t = detail::tape_of(a, b);
  detail::require_same_shape("div", a.value(), b.value());
  Array out = a.value().cwiseQuotient(b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](Tape& tp, const Array& g) {
                  const Array& bv = tp.value(ib);
                  if (tp.requires_grad(ia)) tp.add_grad(ia, g.cwiseQuotient(bv));
                  if (tp.requires_grad(ib)) {
                    const Array& av = tp.value(ia);
                    tp.add_grad(ib, -(g.array() * av.array() / (bv.array() * bv.array())).matrix());
                  }
                });
}

/// scale * a + shift, elementwise.
inline Var affine(const Var& a, double scale, double shift = 0.0) {
  Tape& t = detail::tape_of(a);
  Array out = (a.value().array() * scale + shift).matrix();
  const std::size_t ia = a.id();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, scale](Tape& tp, const Array& g) { tp.add_grad(ia, g * scale); });
}

inline Var scale(const Var& a, double s) { return affine(a, s, 0.0); }

/// Elementwise product with a constant array (masks, dropout).
inline Var mul_const(const Var& a, const Array& m) {
  Tape& t = detail::tape_of(a);
  detail::require_same_shape("mul_const", a.value(), m);
  Array out = a.value().cwiseProduct(m);
  const std::size_t ia = a.id();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, m](Tape& tp, const Array& g) { tp.add_grad(ia, g.cwiseProduct(m)); });
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Var sigmoid(const Var& a) {
  Tape& t = detail::tape_of(a);
  Array out = a.value().unaryExpr([](double x) { return sigmoid_scalar(x); });
  const std::size_t ia = a.id();
  const std::size_t self = t.size();
  return t.push(std::move(out), t.requires_grad(ia), [ia, self](Tape& tp, const Array& g) {
    const Array& y = tp.value(self);
    tp.add_grad(ia, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

inline Var tanh(const Var& a) {
  Tape& t = detail::tape_of(a);
  Array out = a.value().array().tanh().matrix();
  const std::size_t ia = a.id();
  const std::size_t self = t.size();
  return t.push(std::move(out), t.requires_grad(ia), [ia, self](Tape& tp, const Array& g) {
    const Array& y = tp.value(self);
    tp.add_grad(ia, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var abs(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::abs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var log(const Var& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

inline Var sin(const Var& a) {
  return detail::unary(a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

inline Var cos(const Var& a) {
  return detail::unary(a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

/// max(a, floor); the gradient passes only where a > floor.
inline Var clamp_min(const Var& a, double floor) {
  return detail::unary(
      a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x) { return x > floor ? 1.0 : 0.0; });
}

inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  Array out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(std::move(out), t.requires_grad(ia), [ia, r, c](Tape& tp, const Array& g) {
    tp.add_grad(ia, Array::Constant(r, c, g(0, 0)));
  });
}

inline Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean of an empty array");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Sum over columns: [r x c] -> [r x 1].
inline Var row_sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  Array out = a.value().rowwise().sum();
  const std::size_t ia = a.id();
  const Eigen::Index c = a.cols();
  return t.push(std::move(out), t.requires_grad(ia), [ia, c](Tape& tp, const Array& g) {
    tp.add_grad(ia, g.replicate(1, c));
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Tape& t = detail::tape_of(parts.front());
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool need = false;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::logic_error("concat_cols: operands on different tapes");
    if (p.rows() != rows) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_of(parts.front().value()) +
                                  " vs " + shape_of(p.value()));
    }
    cols += p.cols();
    need = need || t.requires_grad(p.id());
  }
  Array out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  spans.reserve(parts.size());
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return t.push(std::move(out), need, [spans](Tape& tp, const Array& g) {
    Eigen::Index off = 0;
    for (const auto& [id, w] : spans) {
      if (tp.requires_grad(id)) tp.add_grad(id, g.middleCols(off, w));
      off += w;
    }
  });
}

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  Tape& t = detail::tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(start) + ", +" +
                                std::to_string(count) + ") outside " + shape_of(a.value()));
  }
  Array out = a.value().middleCols(start, count);
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, r, c, start, count](Tape& tp, const Array& g) {
                  Array full = Array::Zero(r, c);
                  full.middleCols(start, count) = g;
                  tp.add_grad(ia, full);
                });
}

/// Inverted-dropout mask: zero with probability `rate`, otherwise 1/(1-rate).
template <typename Rng>
Array dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0,1), got " + std::to_string(rate));
  }
  Array m(rows, cols);
  if (rate == 0.0) {
    m.setOnes();
    return m;
  }
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? s : 0.0;
  return m;
}

template <typename Rng>
Var dropout(const Var& a, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return a;
  return mul_const(a, dropout_mask(a.rows(), a.cols(), rate, rng));
}

}  // namespace ras::tensor
