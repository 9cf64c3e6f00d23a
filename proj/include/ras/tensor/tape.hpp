#pragma once

// Reverse-mode differentiation over dense float64 matrices.
//
// A Tape records every operation applied to its Vars. One call to backward()
// produces gradients for every reachable node: bound parameters and any
// leaf created with input(). Vars are handles into the tape that made them
// and must not outlive it.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace ras::tensor {

using Array = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_of(const Array& a) {
  return "[" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + "]";
}

inline bool all_finite(const Array& a) { return a.allFinite(); }

/// A named learnable array with its accumulated gradient.
struct Parameter {
  std::string name;
  Array value;
  Array grad;

  Parameter() = default;
  Parameter(std::string n, Array v)
      : name(std::move(n)), value(std::move(v)), grad(Array::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;

  [[nodiscard]] bool valid() const noexcept { return tape_ != nullptr; }
  [[nodiscard]] const Array& value() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const;
  [[nodiscard]] Tape* tape() const noexcept { return tape_; }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Array&)>;

  Tape() = default;
  explicit Tape(bool track_params) : track_params_(track_params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When false, bind() yields constants: no parameter gradients are formed.
  void set_track_params(bool on) noexcept { track_params_ = on; }
  [[nodiscard]] bool tracks_params() const noexcept { return track_params_; }

  Var constant(Array v) { return push_leaf(std::move(v), nullptr, false, nullptr); }

  /// Constant that refers to caller-owned storage; the array must outlive the tape.
  Var constant_ref(const Array& v) { return push_leaf(Array(), &v, false, nullptr); }

  /// Differentiable leaf (e.g. model inputs whose gradient is wanted).
  Var input(Array v) { return push_leaf(std::move(v), nullptr, true, nullptr); }

  Var bind(const Parameter& p) {
    if (!track_params_) return constant_ref(p.value);
    if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
    Var v = push_leaf(Array(), &p.value, true, &p);
    bound_.emplace(&p, v.id());
    return v;
  }

  /// Records an interior node; `needs_grad` is false when no parent needs a gradient.
  Var push(Array value, bool needs_grad, Backprop fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs_grad;
    if (needs_grad) n.backprop = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  [[nodiscard]] const Array& value(std::size_t id) const { return nodes_.at(id).val(); }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  [[nodiscard]] bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  template <typename Expr>
  void add_grad(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var& loss) {
    if (!loss.valid() || loss.tape() != this || loss.id() >= nodes_.size()) {
      throw std::logic_error("backward: loss was not recorded on this tape");
    }
    const Array& lv = nodes_[loss.id()].val();
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_of(lv));
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = Array::Ones(1, 1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0 || !n.backprop) continue;
      n.backprop(*this, n.grad);
    }
  }

  /// Gradient of the last backward() w.r.t. `v`; zeros when unreachable.
  [[nodiscard]] Array grad(const Var& v) const {
    if (!backward_done_) throw std::logic_error("grad: backward() has not run");
    const Node& n = nodes_.at(v.id());
    if (n.grad.size() == 0) return Array::Zero(n.val().rows(), n.val().cols());
    return n.grad;
  }

  /// Adds the gradients of bound parameters into their Parameter::grad.
  void accumulate(std::span<Parameter* const> params) const {
    if (!backward_done_) throw std::logic_error("accumulate: backward() has not run");
    for (Parameter* p : params) {
      auto it = bound_.find(p);
      if (it == bound_.end()) continue;
      const Node& n = nodes_[it->second];
      if (n.grad.size() == 0) continue;
      if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
      p->grad += n.grad;
    }
  }

 private:
  struct Node {
    Array value;
    const Array* ref = nullptr;
    Array grad;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    Backprop backprop;
    [[nodiscard]] const Array& val() const { return ref ? *ref : value; }
  };

  Var push_leaf(Array v, const Array* ref, bool needs_grad, const Parameter* p) {
    Node n;
    n.value = std::move(v);
    n.ref = ref;
    n.requires_grad = needs_grad;
    n.param = p;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  bool track_params_ = true;
  bool backward_done_ = false;
};

inline const Array& Var::value() const {
  if (!tape_) throw std::logic_error("Var: empty handle");
  return tape_->value(id_);
}

inline double Var::scalar() const {
  const Array& v = value();
  if (v.size() != 1) throw std::invalid_argument("Var::scalar on " + shape_of(v));
  return v(0, 0);
}

}  // namespace ras::tensor
