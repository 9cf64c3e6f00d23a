#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/special_functions/erf.hpp>
#include <boost/random/sobol.hpp>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "ras/uncertainty/correlation.hpp"

namespace ras::uncertainty {

namespace detail {

inline void check_row(const Array& a, Eigen::Index k, const char* what) {
  if (a.rows() != 1 || a.cols() != k) {
    throw std::invalid_argument(std::string(what) + ": expected 1x" + std::to_string(k) + ", got " +
                                tensor::shape_of(a));
  }
}

inline void check_sigma(const Array& sigma) {
  for (Eigen::Index j = 0; j < sigma.size(); ++j) {
    if (!(sigma.data()[j] >= 0.0) || !std::isfinite(sigma.data()[j])) {
      throw std::invalid_argument("sigma must be finite and non-negative (index " + std::to_string(j) + ")");
    }
  }
}

inline Eigen::VectorXd scaled(const Array& w, const Array& sigma) {
  return (w.array() * sigma.array()).matrix().transpose();
}

}  // namespace detail

/// wᵀ(σσᵀ∘ρ)w.
inline double propagate_linear(const Array& w, const Array& sigma, const CorrelationMatrix& rho) {
  const auto k = static_cast<Eigen::Index>(rho.size());
  detail::check_row(w, k, "propagate_linear w");
  detail::check_row(sigma, k, "propagate_linear sigma");
  detail::check_sigma(sigma);
  const Eigen::VectorXd v = detail::scaled(w, sigma);
  return v.dot(rho.rho * v);
}

/// Per-variable reduction U_i = g_i²σ_i² + Σ_{j≠i} g_i g_j ρ_ij σ_i σ_j; sums to the total.
inline std::vector<double> per_variable_scores(const Array& grad, const Array& sigma, const CorrelationMatrix& rho) {
  const Eigen::VectorXd v = detail::scaled(grad, sigma);
  const Eigen::VectorXd rv = rho.rho * v;
  std::vector<double> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = v(i) * rv(i);
  return out;
}

struct DeltaEstimate {
  double U_x = 0.0;      // clamped at 0
  double U_x_raw = 0.0;  // bilinear form before clamping
  std::vector<double> per_variable;
  double value = 0.0;    // f(x)
};

inline DeltaEstimate delta_from_gradient(const Array& grad, const Array& sigma, const CorrelationMatrix& rho) {
  const auto k = static_cast<Eigen::Index>(rho.size());
  detail::check_row(grad, k, "delta gradient");
  detail::check_row(sigma, k, "delta sigma");
  detail::check_sigma(sigma);
  if (!grad.allFinite()) throw std::domain_error("propagated uncertainty: non-finite input gradient");
  DeltaEstimate e;
  e.per_variable = per_variable_scores(grad, sigma, rho);
  for (double s : e.per_variable) e.U_x_raw += s;
  e.U_x = std::max(0.0, e.U_x_raw);
  return e;
}

/// Delta-method variance of a scalar field at x. `Field` exposes
/// `Array evaluate(const Array& X, Array* grad) const` over rows of X.
template <typename Field>
DeltaEstimate propagated_uncertainty_delta(const Field& f, const Array& x, const Array& sigma,
                                           const CorrelationMatrix& rho) {
  detail::check_row(x, static_cast<Eigen::Index>(rho.size()), "delta x");
  Array g;
  const double v = f.evaluate(x, &g)(0, 0);
  DeltaEstimate e = delta_from_gradient(g, sigma, rho);
  e.value = v;
  return e;
}

/// Unbiased sample variance, accumulated with Welford's update.
class RunningVariance {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
  }
  [[nodiscard]] std::size_t count() const noexcept { return n_; }
  [[nodiscard]] double mean() const noexcept { return mean_; }
  [[nodiscard]] double variance() const {
    if (n_ < 2) throw std::logic_error("sample variance needs at least two values");
    return m2_ / static_cast<double>(n_ - 1);
  }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

enum class Sampler { sobol, pseudo_random };

inline double standard_normal_quantile(double u) { return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * u); }

/// Square-root factor L with LLᵀ = C for a PSD covariance.
inline Eigen::MatrixXd covariance_factor(const Eigen::MatrixXd& C) {
  Eigen::LLT<Eigen::MatrixXd> llt(C);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  if (es.info() != Eigen::Success) throw std::runtime_error("covariance factorization failed");
  const double tol = 1e-8 * std::max(1.0, C.diagonal().maxCoeff());
  if (es.eigenvalues().minCoeff() < -tol) {
    throw std::runtime_error("covariance factorization failed: matrix is not positive semidefinite (min eigenvalue " +
                             std::to_string(es.eigenvalues().minCoeff()) + ")");
  }
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

struct MonteCarloOptions {
  std::size_t samples = 10000;
  std::uint64_t seed = 1;
  Sampler sampler = Sampler::sobol;
  std::size_t chunk = 512;
};

/// Sample variance of f over joint Gaussian draws of the coordinates with σ > 0
/// (mean x, covariance σσᵀ∘ρ). Sobol points carry a seeded random shift.
template <typename Field>
double propagated_uncertainty_mc(const Field& f, const Array& x, const Array& sigma, const CorrelationMatrix& rho,
                                 const MonteCarloOptions& opt = {}) {
  const auto k = static_cast<Eigen::Index>(rho.size());
  detail::check_row(x, k, "mc x");
  detail::check_row(sigma, k, "mc sigma");
  detail::check_sigma(sigma);
  if (opt.samples < 2) throw std::invalid_argument("propagated_uncertainty_mc: need at least 2 samples");
  std::vector<Eigen::Index> free;
  for (Eigen::Index j = 0; j < k; ++j) {
    if (sigma(0, j) > 0.0) free.push_back(j);
  }
  if (free.empty()) return 0.0;
  const auto m = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd C(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) C(a, b) = sigma(0, free[a]) * sigma(0, free[b]) * rho.rho(free[a], free[b]);
  }
  const Eigen::MatrixXd L = covariance_factor(C);

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  boost::random::sobol qrng(static_cast<std::size_t>(m));
  std::vector<double> shift(static_cast<std::size_t>(m));
  {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (auto& s : shift) s = u01(rng);
  }

  RunningVariance var;
  Eigen::VectorXd z(m);
  std::size_t done = 0;
  while (done < opt.samples) {
    const std::size_t B = std::min(opt.chunk, opt.samples - done);
    Array X = x.replicate(static_cast<Eigen::Index>(B), 1);
    for (std::size_t r = 0; r < B; ++r) {
      for (Eigen::Index a = 0; a < m; ++a) {
        if (opt.sampler == Sampler::sobol) {
          double u = (static_cast<double>(qrng() >> 11) + 0.5) * 0x1p-53 + shift[static_cast<std::size_t>(a)];
          if (u >= 1.0) u -= 1.0;
          z(a) = standard_normal_quantile(u);
        } else {
          z(a) = normal(rng);
        }
      }
      const Eigen::VectorXd d = L * z;
      for (Eigen::Index a = 0; a < m; ++a) X(static_cast<Eigen::Index>(r), free[a]) += d(a);
    }
    const Array v = f.evaluate(X, nullptr);
    for (Eigen::Index r = 0; r < v.rows(); ++r) var.add(v(r, 0));
    done += B;
  }
  return var.variance();
}

}  // namespace ras::uncertainty
