#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "ras/cohort/record.hpp"

namespace ras::uncertainty {

using tensor::Array;
using cohort::Mask;

/// Pairwise correlation between input variables, estimated on co-observed collections.
struct CorrelationMatrix {
  Eigen::MatrixXd rho;
  Eigen::MatrixXi support;

  [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(rho.rows()); }

  [[nodiscard]] bool is_diagonal() const {
    for (Eigen::Index i = 0; i < rho.rows(); ++i) {
      for (Eigen::Index j = 0; j < rho.cols(); ++j) {
        if (i != j && rho(i, j) != 0.0) return false;
      }
    }
    return true;
  }

  static CorrelationMatrix identity(std::size_t k) {
    const auto n = static_cast<Eigen::Index>(k);
    return {Eigen::MatrixXd::Identity(n, n), Eigen::MatrixXi::Zero(n, n)};
  }
};

inline constexpr int kMinCorrelationSupport = 30;

/// Clips negative eigenvalues to zero and rescales back to a unit diagonal.
inline Eigen::MatrixXd repair_psd(const Eigen::MatrixXd& rho) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(rho);
  if (es.info() != Eigen::Success) throw std::runtime_error("correlation repair: eigendecomposition failed");
  if (es.eigenvalues().minCoeff() >= 0.0) return rho;
  const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0);
  Eigen::MatrixXd r = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
  Eigen::VectorXd d = r.diagonal().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  r = d.asDiagonal() * r * d.asDiagonal();
  r = 0.5 * (r + r.transpose());
  r.diagonal().setOnes();
  return r;
}

/// Pearson correlation from stacked collections: rows of `values`, with `observed`
/// marking which cells take part. Pairs seen together fewer than `min_support`
/// times are set to 0.
inline CorrelationMatrix correlation_from_rows(const Array& values, const Mask& observed,
                                               int min_support = kMinCorrelationSupport) {
  if (values.rows() != observed.rows() || values.cols() != observed.cols()) {
    throw std::invalid_argument("correlation: values and mask shapes differ");
  }
  const Eigen::Index n = values.rows(), k = values.cols();
  Eigen::VectorXd shift = Eigen::VectorXd::Zero(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    double s = 0.0;
    Eigen::Index m = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (observed(r, j)) {
        s += values(r, j);
        ++m;
      }
    }
    if (m > 0) shift(j) = s / static_cast<double>(m);
  }
  // Per-pair running moments over rows where both variables are observed.
  Eigen::MatrixXd sx = Eigen::MatrixXd::Zero(k, k), sxx = sx, sxy = sx;
  Eigen::MatrixXi cnt = Eigen::MatrixXi::Zero(k, k);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index i = 0; i < k; ++i) {
      if (!observed(r, i)) continue;
      const double a = values(r, i) - shift(i);
      for (Eigen::Index j = 0; j < k; ++j) {
        if (!observed(r, j)) continue;
        const double b = values(r, j) - shift(j);
        cnt(i, j) += 1;
        sx(i, j) += a;
        sxx(i, j) += a * a;
        sxy(i, j) += a * b;
      }
    }
  }
  CorrelationMatrix out{Eigen::MatrixXd::Identity(k, k), cnt};
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const int c = cnt(i, j);
      if (c < min_support || c < 2) continue;
      const double mi = sx(i, j) / c, mj = sx(j, i) / c;
      const double vi = sxx(i, j) / c - mi * mi;
      const double vj = sxx(j, i) / c - mj * mj;
      const double cov = sxy(i, j) / c - mi * mj;
      if (!(vi > 1e-12 * (1.0 + mi * mi)) || !(vj > 1e-12 * (1.0 + mj * mj))) continue;
      const double r = std::clamp(cov / std::sqrt(vi * vj), -1.0, 1.0);
      out.rho(i, j) = out.rho(j, i) = r;
    }
  }
  out.rho = repair_psd(out.rho);
  return out;
}

inline CorrelationMatrix estimate_correlations(const cohort::Cohort& train, int min_support = kMinCorrelationSupport) {
  if (train.empty()) throw std::invalid_argument("estimate_correlations: empty cohort");
  Eigen::Index rows = 0;
  const Eigen::Index k = train.front().values.cols();
  for (const auto& p : train) {
    if (p.values.cols() != k) throw std::invalid_argument("estimate_correlations: records differ in width");
    rows += p.values.rows();
  }
  Array values(rows, k);
  Mask observed(rows, k);
  Eigen::Index r = 0;
  for (const auto& p : train) {
    values.middleRows(r, p.values.rows()) = p.values;
    observed.middleRows(r, p.values.rows()) = p.observed;
    r += p.values.rows();
  }
  return correlation_from_rows(values, observed, min_support);
}

inline nlohmann::json to_json(const CorrelationMatrix& c) {
  nlohmann::json rho = nlohmann::json::array(), sup = nlohmann::json::array();
  for (Eigen::Index i = 0; i < c.rho.rows(); ++i) {
    nlohmann::json a = nlohmann::json::array(), b = nlohmann::json::array();
    for (Eigen::Index j = 0; j < c.rho.cols(); ++j) {
      a.push_back(c.rho(i, j));
      b.push_back(c.support(i, j));
    }
    rho.push_back(std::move(a));
    sup.push_back(std::move(b));
  }
  return {{"rho", rho}, {"support", sup}};
}

inline CorrelationMatrix correlation_from_json(const nlohmann::json& j) {
  const auto& rho = j.at("rho");
  const auto k = static_cast<Eigen::Index>(rho.size());
  CorrelationMatrix c{Eigen::MatrixXd(k, k), Eigen::MatrixXi::Zero(k, k)};
  for (Eigen::Index a = 0; a < k; ++a) {
    if (rho[static_cast<std::size_t>(a)].size() != static_cast<std::size_t>(k)) {
      throw std::invalid_argument("correlation json: rho is not square");
    }
    for (Eigen::Index b = 0; b < k; ++b) {
      c.rho(a, b) = rho[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)].get<double>();
      if (j.contains("support")) c.support(a, b) = j["support"][static_cast<std::size_t>(a)][static_cast<std::size_t>(b)].get<int>();
    }
  }
  return c;
}

}  // namespace ras::uncertainty
