#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ras/harness/auroc.hpp"
#include "ras/imputer/imputer.hpp"
#include "ras/sensing/policy.hpp"
#include "ras/uncertainty/report.hpp"
#include "ras/util/seed.hpp"

namespace ras::sensing {

using uncertainty::CorrelationMatrix;
using uncertainty::ReportOptions;

/// Frozen models an episode reads from. `predictor` is the model whose risk is
/// reported and, for gradient policies, whose per-variable scores drive selection.
struct EpisodeModels {
  const imputer::Imputer* imputer = nullptr;
  const predictor::RiskModel* predictor = nullptr;
  const CorrelationMatrix* rho = nullptr;
  ReportOptions report;

  void validate() const {
    if (!imputer || !predictor || !rho) throw std::invalid_argument("episode: missing model");
    if (imputer->width() != predictor->width() || rho->size() != predictor->width()) {
      throw std::invalid_argument("episode: imputer, predictor and correlation widths differ");
    }
  }
};

struct RevealedValue {
  std::size_t variable = 0;
  std::string name;
  double value = 0.0;
};

struct HourLog {
  std::size_t index = 0;
  double hour = 0.0;
  std::uint8_t label = 0;
  double risk_pre = 0.0, risk_post = 0.0;
  double Ux_pre = 0.0, Ux_post = 0.0;
  double Uw = 0.0;
  std::vector<RevealedValue> revealed;
};

struct SensingEpisode {
  std::string patient_id;
  std::vector<HourLog> hours;
  std::size_t allowance = 0;
  std::size_t cumulative_reveals = 0;
  std::size_t decisions = 0;    // collections at which the policy scored candidates
  double scoring_ms = 0.0;      // total policy scoring wall time
};

inline nlohmann::json to_json(const HourLog& h, const std::string& patient) {
  nlohmann::json rv = nlohmann::json::array();
  for (const auto& r : h.revealed) rv.push_back({{"name", r.name}, {"value", r.value}});
  return {{"patient", patient}, {"hour", h.hour},           {"risk_pre", h.risk_pre}, {"risk_post", h.risk_post},
          {"Ux_pre", h.Ux_pre}, {"Ux_post", h.Ux_post}, {"Uw", h.Uw},             {"revealed", rv}};
}

inline void write_episode_log(std::ostream& os, const std::vector<SensingEpisode>& episodes) {
  for (const auto& e : episodes) {
    for (const auto& h : e.hours) os << to_json(h, e.patient_id).dump() << '\n';
  }
}

namespace detail {

struct HourInputs {
  imputer::Imputer::StepOutput step;
  Array x;
  Array sigma;
};

inline HourInputs impute_hour(const imputer::Imputer& imp, const imputer::Imputer::RunningState& prev,
                              const cohort::PatientRecord& p, std::size_t i) {
  const auto ii = static_cast<Eigen::Index>(i);
  HourInputs h;
  const Array z = imp.standardize_row(p.values.row(ii), p.observed.row(ii));
  h.step = imp.step(prev, z, p.times[i]);
  h.x = z;
  h.sigma = Array::Zero(1, z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    if (!p.observed(ii, j)) {
      h.x(0, j) = h.step.z_mu(0, j);
      h.sigma(0, j) = h.step.z_sigma(0, j);
    }
  }
  return h;
}

}  // namespace detail

/// Hourly impute, score, reveal, re-predict loop over a private copy of `patient`.
inline SensingEpisode run_episode(const cohort::PatientRecord& patient, const SensingPolicy& policy,
                                  const EpisodeModels& models, const Oracle& oracle = synthetic_oracle) {
  policy.validate();
  models.validate();
  const auto& imp = *models.imputer;
  const auto& m = *models.predictor;
  const auto& names = imp.schema().names;
  cohort::PatientRecord p = patient;
  p.validate(imp.schema());

  std::vector<std::size_t> maskable(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) maskable[i] = p.unobserved_count(i);
  const std::vector<std::size_t> quota = allocate_budget(maskable, policy.budget);

  SensingEpisode ep;
  ep.patient_id = p.id;
  for (auto q : quota) ep.allowance += q;
  const std::uint64_t pseed = util::derive_seed(policy.seed, {util::stable_hash(p.id)});
  std::mt19937_64 pick_rng(util::derive_seed(pseed, {0}));

  auto istate = imp.initial_state(1);
  auto pstate = m.initial_state(1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    HourLog log;
    log.index = i;
    log.hour = p.times[i];
    log.label = p.labels[i];
    detail::HourInputs in = detail::impute_hour(imp, istate, p, i);
    const std::uint64_t hseed = util::derive_seed(pseed, {i + 1});
    auto pre = uncertainty::point_report(m, pstate, in.x, in.sigma, p.times[i], *models.rho, models.report,
                                         util::derive_seed(models.report.seed, {util::stable_hash(p.id), i}));
    log.risk_pre = pre.report.risk;
    log.Ux_pre = pre.report.U_x;
    log.Uw = pre.report.U_w;

    const std::vector<std::size_t> candidates = unobserved_at(p, i);
    const std::size_t want = std::min(quota[i], candidates.size());
    if (want > 0) {
      std::vector<std::size_t> chosen;
      ++ep.decisions;
      if (uses_gradient_scores(policy.kind)) {
        ep.scoring_ms += pre.scoring_ms;
        chosen = select_variables(pre.report.per_variable, candidates, want);
      } else if (policy.kind == PolicyKind::mc_sampling) {
        const auto t0 = std::chrono::steady_clock::now();
        const predictor::RiskPoint rp{&m, pstate, p.times[i], Array()};
        const auto scores = mc_sampling_policy_score(rp, in.x, in.sigma, policy.mc_samples, hseed);
        ep.scoring_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        chosen = select_variables(scores, candidates, want);
      } else {
        chosen = candidates;
        std::shuffle(chosen.begin(), chosen.end(), pick_rng);
        chosen.resize(want);
      }
      for (std::size_t j : chosen) {
        const double v = reveal(p, i, j, oracle);
        log.revealed.push_back({j, names[j], v});
      }
      ep.cumulative_reveals += chosen.size();
      in = detail::impute_hour(imp, istate, p, i);
      auto post = uncertainty::point_report(m, pstate, in.x, in.sigma, p.times[i], *models.rho, models.report,
                                            util::derive_seed(models.report.seed, {util::stable_hash(p.id), i}));
      log.risk_post = post.report.risk;
      log.Ux_post = post.report.U_x;
      log.Uw = post.report.U_w;
      pstate = std::move(post.next);
    } else {
      log.risk_post = log.risk_pre;
      log.Ux_post = log.Ux_pre;
      pstate = std::move(pre.next);
    }
    istate = std::move(in.step.state);
    ep.hours.push_back(std::move(log));
  }
  return ep;
}

struct PolicyResult {
  double auroc = 0.0;
  double mean_ux = 0.0;
  double mean_uw = 0.0;
  double latency_ms = 0.0;  // mean scoring time per decision
  std::vector<SensingEpisode> episodes;
};

/// Runs one episode per patient (in parallel up to `workers`) and pools every hour's post-reveal risk.
inline PolicyResult evaluate_policy(const cohort::Cohort& cohort, const SensingPolicy& policy,
                                    const EpisodeModels& models, std::size_t workers = 1,
                                    const Oracle& oracle = synthetic_oracle) {
  policy.validate();
  models.validate();
  PolicyResult out;
  out.episodes.resize(cohort.size());
  workers = std::max<std::size_t>(1, std::min(workers, cohort.size()));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t n = w; n < cohort.size(); n += workers) out.episodes[n] = run_episode(cohort[n], policy, models, oracle);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<double> scores;
  std::vector<bool> labels;
  double ux = 0.0, uw = 0.0, ms = 0.0;
  std::size_t decisions = 0;
  for (const auto& e : out.episodes) {
    for (const auto& h : e.hours) {
      scores.push_back(h.risk_post);
      labels.push_back(h.label != 0);
      ux += h.Ux_post;
      uw += h.Uw;
    }
    ms += e.scoring_ms;
    decisions += e.decisions;
  }
  if (scores.empty()) throw std::invalid_argument("evaluate_policy: cohort has no collections");
  out.auroc = harness::auroc(scores, labels);
  out.mean_ux = ux / static_cast<double>(scores.size());
  out.mean_uw = uw / static_cast<double>(scores.size());
  out.latency_ms = decisions ? ms / static_cast<double>(decisions) : 0.0;
  return out;
}

}  // namespace ras::sensing
