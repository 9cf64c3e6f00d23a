#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ras/cohort/record.hpp"
#include "ras/predictor/risk_model.hpp"
#include "ras/uncertainty/propagation.hpp"
#include "ras/uncertainty/report.hpp"

namespace ras::sensing {

using tensor::Array;

enum class PolicyKind { random, mc_sampling, ras_n, ras_l, ras };

inline std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::random: return "random";
    case PolicyKind::mc_sampling: return "mc_sampling";
    case PolicyKind::ras_n: return "ras_n";
    case PolicyKind::ras_l: return "ras_l";
    case PolicyKind::ras: return "ras";
  }
  return "?";
}

inline PolicyKind policy_from_string(const std::string& s) {
  for (auto k : {PolicyKind::random, PolicyKind::mc_sampling, PolicyKind::ras_n, PolicyKind::ras_l, PolicyKind::ras}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown sensing policy '" + s + "'");
}

/// Gradient-scored policies read per-variable reductions from the uncertainty report.
inline bool uses_gradient_scores(PolicyKind k) {
  return k == PolicyKind::ras_n || k == PolicyKind::ras_l || k == PolicyKind::ras;
}

struct SensingPolicy {
  PolicyKind kind = PolicyKind::ras;
  double budget = 0.08;             // fraction of maskable (initially unobserved) entries
  std::size_t mc_samples = 100;     // per-variable forwards for mc_sampling
  std::uint64_t seed = 1;

  void validate() const {
    if (!(budget > 0.0 && budget <= 1.0)) {
      throw std::invalid_argument("sensing budget must lie in (0,1], got " + std::to_string(budget));
    }
    if (kind == PolicyKind::mc_sampling && mc_samples < 2) {
      throw std::invalid_argument("mc_sampling policy needs at least 2 samples");
    }
  }
};

/// The `m` candidates with the highest scores, descending; equal scores go to the lower index.
inline std::vector<std::size_t> select_variables(const std::vector<double>& scores,
                                                 const std::vector<std::size_t>& unobserved, std::size_t m) {
  if (m > unobserved.size()) {
    throw std::invalid_argument("select_variables: asked for " + std::to_string(m) + " of " +
                                std::to_string(unobserved.size()) + " unobserved variables");
  }
  std::vector<std::size_t> c = unobserved;
  for (auto j : c) {
    if (j >= scores.size()) throw std::out_of_range("select_variables: variable index without a score");
  }
  std::sort(c.begin(), c.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  c.resize(m);
  return c;
}

inline std::vector<std::size_t> select_variables(const uncertainty::UncertaintyReport& r,
                                                 const std::vector<std::size_t>& unobserved, std::size_t m) {
  return select_variables(r.per_variable, unobserved, m);
}

class AlreadyObserved : public std::logic_error {
 public:
  AlreadyObserved(const std::string& patient, std::size_t i, std::size_t j)
      : std::logic_error("reveal: variable " + std::to_string(j) + " at collection " + std::to_string(i) +
                         " of record " + patient + " is already observed"),
        variable(j) {}
  std::size_t variable;
};

/// Supplies the measured value of an unobserved cell.
using Oracle = std::function<double(const cohort::PatientRecord&, std::size_t, std::size_t)>;

inline double synthetic_oracle(const cohort::PatientRecord& p, std::size_t i, std::size_t j) {
  return cohort::true_conditional(p, i, j);
}

/// Marks (i, j) observed with the oracle's value and returns that value.
inline double reveal(cohort::PatientRecord& p, std::size_t i, std::size_t j, const Oracle& oracle = synthetic_oracle) {
  if (i >= p.size() || j >= p.width()) throw std::out_of_range("reveal: cell outside record " + p.id);
  const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
  if (p.observed(ii, jj)) throw AlreadyObserved(p.id, i, j);
  const double v = oracle(p, i, j);
  if (!std::isfinite(v)) throw std::domain_error("reveal: oracle returned a non-finite value");
  p.values(ii, jj) = v;
  p.observed(ii, jj) = true;
  return v;
}

inline std::vector<std::size_t> unobserved_at(const cohort::PatientRecord& p, std::size_t i) {
  std::vector<std::size_t> out;
  const auto ii = static_cast<Eigen::Index>(i);
  for (Eigen::Index j = 0; j < p.observed.cols(); ++j) {
    if (!p.observed(ii, j)) out.push_back(static_cast<std::size_t>(j));
  }
  return out;
}

/// Splits round(budget * N) reveals over collections in proportion to each
/// collection's unobserved count, largest remainders first (earlier collection on ties).
inline std::vector<std::size_t> allocate_budget(const std::vector<std::size_t>& maskable, double budget) {
  if (!(budget > 0.0 && budget <= 1.0)) throw std::invalid_argument("allocate_budget: budget outside (0,1]");
  const std::size_t N = std::accumulate(maskable.begin(), maskable.end(), std::size_t{0});
  std::vector<std::size_t> q(maskable.size(), 0);
  if (N == 0) return q;
  const auto A = static_cast<std::size_t>(std::floor(budget * static_cast<double>(N) + 0.5));
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t given = 0;
  for (std::size_t h = 0; h < maskable.size(); ++h) {
    const double share = static_cast<double>(A) * static_cast<double>(maskable[h]) / static_cast<double>(N);
    q[h] = std::min(maskable[h], static_cast<std::size_t>(std::floor(share)));
    given += q[h];
    rem.emplace_back(share - static_cast<double>(q[h]), h);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; given < A && r < rem.size(); ++r) {
    const std::size_t h = rem[r].second;
    if (q[h] < maskable[h]) {
      ++q[h];
      ++given;
    }
  }
  return q;
}

/// One-at-a-time Monte-Carlo score: variance of f over S draws of x_i ~ N(x_i, σ_i²) with the
/// other coordinates held at x. Coordinates with σ_i = 0 score 0.
template <typename Field>
std::vector<double> mc_sampling_policy_score(const Field& f, const Array& x, const Array& sigma, std::size_t S,
                                             std::uint64_t seed) {
  if (S < 2) throw std::invalid_argument("mc_sampling_policy_score: need at least 2 samples");
  if (x.rows() != 1 || sigma.rows() != 1 || x.cols() != sigma.cols()) {
    throw std::invalid_argument("mc_sampling_policy_score: x and sigma must be matching single rows");
  }
  uncertainty::detail::check_sigma(sigma);
  const Eigen::Index k = x.cols();
  std::vector<double> out(static_cast<std::size_t>(k), 0.0);
  std::vector<Eigen::Index> free;
  for (Eigen::Index j = 0; j < k; ++j) {
    if (sigma(0, j) > 0.0) free.push_back(j);
  }
  if (free.empty()) return out;
  const auto SS = static_cast<Eigen::Index>(S);
  Array X = x.replicate(SS * static_cast<Eigen::Index>(free.size()), 1);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  for (std::size_t a = 0; a < free.size(); ++a) {
    const Eigen::Index j = free[a];
    for (Eigen::Index s = 0; s < SS; ++s) X(static_cast<Eigen::Index>(a) * SS + s, j) += sigma(0, j) * z(rng);
  }
  const Array v = f.evaluate(X, nullptr);
  for (std::size_t a = 0; a < free.size(); ++a) {
    uncertainty::RunningVariance var;
    for (Eigen::Index s = 0; s < SS; ++s) var.add(v(static_cast<Eigen::Index>(a) * SS + s, 0));
    out[static_cast<std::size_t>(free[a])] = var.variance();
  }
  return out;
}

}  // namespace ras::sensing
