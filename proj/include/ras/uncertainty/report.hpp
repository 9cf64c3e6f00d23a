#pragma once

#include <chrono>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ras/predictor/risk_model.hpp"
#include "ras/uncertainty/propagation.hpp"
#include "ras/util/seed.hpp"

namespace ras::uncertainty {

using predictor::RiskModel;
using predictor::Sequence;

struct UncertaintyReport {
  double risk = 0.0;  // deterministic pass
  double U = 0.0;
  double U_x = 0.0;
  double U_w = 0.0;
  std::vector<double> per_variable;
  std::size_t samples_used = 0;
};

inline nlohmann::json to_json(const UncertaintyReport& r, const std::vector<std::string>& names) {
  if (names.size() != r.per_variable.size()) throw std::invalid_argument("report json: name count mismatch");
  nlohmann::json pv = nlohmann::json::object();
  for (std::size_t i = 0; i < names.size(); ++i) pv[names[i]] = r.per_variable[i];
  return {{"U", r.U}, {"U_x", r.U_x}, {"U_w", r.U_w}, {"per_variable", pv}, {"samples_used", r.samples_used}};
}

struct ReportOptions {
  std::size_t mask_samples = 10;     // S_x
  std::size_t dropout_samples = 30;  // S_w
  std::uint64_t seed = 1;

  void validate() const {
    if (mask_samples == 0) throw std::invalid_argument("report: need at least one dropout mask for U_x");
    if (dropout_samples < 2) throw std::invalid_argument("report: U_w needs at least 2 dropout passes");
  }
};

/// Sample variance of the risk over `S` head-dropout passes from hidden state `h` (1 x H).
template <typename Rng>
double epistemic_from_state(const RiskModel& m, const Array& h, std::size_t S, Rng& rng) {
  if (S < 2) throw std::invalid_argument("epistemic_uncertainty: need at least 2 samples, got " + std::to_string(S));
  const Array p = m.risk_under_masks(h, m.head_masks(static_cast<Eigen::Index>(S), rng));
  RunningVariance v;
  for (Eigen::Index r = 0; r < p.rows(); ++r) v.add(p(r, 0));
  return v.variance();
}

/// U_w at collection `index` of a sequence whose unobserved cells already hold μ.
inline double epistemic_uncertainty(const RiskModel& m, const Sequence& s, std::size_t index, std::size_t S,
                                    std::uint64_t seed) {
  if (index >= s.size()) throw std::out_of_range("epistemic_uncertainty: collection index out of range");
  if (S < 2) throw std::invalid_argument("epistemic_uncertainty: need at least 2 samples, got " + std::to_string(S));
  const auto prev = m.prefix_state(s.x, s.times, index);
  const auto st = m.step(prev, s.x.row(static_cast<Eigen::Index>(index)), s.times[index]);
  std::mt19937_64 rng(seed);
  return epistemic_from_state(m, st.state.h, S, rng);
}

struct MaskedDelta {
  double U_x = 0.0;
  std::vector<double> per_variable;
};

/// Delta-method U_x and per-variable scores averaged over `masks` (one head mask per row).
inline MaskedDelta delta_over_masks(const RiskModel& m, const RiskModel::RunningState& prev, const Array& x,
                                    const Array& sigma, double t_hours, const CorrelationMatrix& rho,
                                    const Array& masks) {
  MaskedDelta out;
  out.per_variable.assign(m.width(), 0.0);
  if (sigma.maxCoeff() <= 0.0) return out;
  const Eigen::Index S = masks.rows();
  const RiskModel::RunningState rep{prev.h.replicate(S, 1), prev.c.replicate(S, 1)};
  const Array G = m.input_gradient(rep, x.replicate(S, 1), t_hours, &masks);
  double raw = 0.0;
  for (Eigen::Index s = 0; s < S; ++s) {
    const DeltaEstimate e = delta_from_gradient(G.row(s), sigma, rho);
    raw += e.U_x_raw;
    for (std::size_t i = 0; i < e.per_variable.size(); ++i) out.per_variable[i] += e.per_variable[i];
  }
  for (auto& v : out.per_variable) v /= static_cast<double>(S);
  out.U_x = std::max(0.0, raw / static_cast<double>(S));
  return out;
}

struct PointResult {
  UncertaintyReport report;
  RiskModel::RunningState next;  // state after consuming this collection
  double scoring_ms = 0.0;       // wall time of the U_x and per-variable computation
};

/// Full report for one collection given the predictor state before it.
inline PointResult point_report(const RiskModel& m, const RiskModel::RunningState& prev, const Array& x,
                                const Array& sigma, double t_hours, const CorrelationMatrix& rho,
                                const ReportOptions& opt, std::uint64_t point_seed) {
  opt.validate();
  const auto k = static_cast<Eigen::Index>(m.width());
  detail::check_row(x, k, "report x");
  detail::check_row(sigma, k, "report sigma");
  detail::check_sigma(sigma);
  if (rho.size() != m.width()) throw std::invalid_argument("report: correlation size does not match the model");

  PointResult out;
  const auto st = m.step(prev, x, t_hours);
  out.next = st.state;
  UncertaintyReport& r = out.report;
  r.risk = st.risk(0, 0);

  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 mrng(util::derive_seed(point_seed, {1}));
  MaskedDelta d = delta_over_masks(m, prev, x, sigma, t_hours, rho,
                                   m.head_masks(static_cast<Eigen::Index>(opt.mask_samples), mrng));
  out.scoring_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  r.U_x = d.U_x;
  r.per_variable = std::move(d.per_variable);
  std::mt19937_64 wrng(util::derive_seed(point_seed, {2}));
  r.U_w = epistemic_from_state(m, st.state.h, opt.dropout_samples, wrng);
  r.U = r.U_x + r.U_w;
  r.samples_used = opt.mask_samples + opt.dropout_samples;
  return out;
}

/// Reports for every collection of a prepared sequence.
inline std::vector<UncertaintyReport> trajectory_reports(const RiskModel& m, const Sequence& s,
                                                         const CorrelationMatrix& rho, const ReportOptions& opt = {}) {
  std::vector<UncertaintyReport> out;
  out.reserve(s.size());
  auto state = m.initial_state(1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    auto pr = point_report(m, state, s.x.row(ii), s.sigma.row(ii), s.times[i], rho, opt,
                           util::derive_seed(opt.seed, {i}));
    out.push_back(std::move(pr.report));
    state = std::move(pr.next);
  }
  return out;
}

/// Report at collection `index` of a raw record: imputes, then scores.
inline UncertaintyReport full_report(const cohort::PatientRecord& p, const RiskModel& m, const imputer::Imputer& imp,
                                     const CorrelationMatrix& rho, std::size_t index, const ReportOptions& opt = {}) {
  if (index >= p.size()) throw std::out_of_range("full_report: collection index out of range");
  const Sequence s = predictor::make_sequence(p, imp.impute(p));
  const auto prev = m.prefix_state(s.x, s.times, index);
  const auto ii = static_cast<Eigen::Index>(index);
  return point_report(m, prev, s.x.row(ii), s.sigma.row(ii), s.times[index], rho, opt,
                      util::derive_seed(opt.seed, {index}))
      .report;
}

}  // namespace ras::uncertainty
