#pragma once

// State behind the HTTP facade. Readers take a shared_ptr to an immutable
// snapshot; /observe builds a new snapshot under the writer lock and swaps it in.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ras/cohort/csv.hpp"
#include "ras/harness/pipeline.hpp"
#include "ras/sensing/policy.hpp"
#include "ras/uncertainty/report.hpp"

namespace ras::service {

using nlohmann::json;
using tensor::Array;

/// An error with its HTTP status and a stable machine-readable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message, json extra = json::object())
      : std::runtime_error(message), status(status), code(std::move(code)), extra(std::move(extra)) {}
  int status;
  std::string code;
  json extra;  // merged into the body, e.g. the conflicting variable

  [[nodiscard]] json body() const {
    json b = extra;
    b["code"] = code;
    b["message"] = what();
    return b;
  }
};

inline std::string risk_tier(double risk) {
  if (risk < 0.33) return "green";
  if (risk < 0.66) return "yellow";
  return "red";
}

/// risk ± 2√U clipped to [0, 1].
inline std::pair<double, double> risk_band(double risk, double U) {
  const double half = 2.0 * std::sqrt(std::max(0.0, U));
  return {std::clamp(risk - half, 0.0, 1.0), std::clamp(risk + half, 0.0, 1.0)};
}

/// One patient scored end to end. Never modified after construction.
struct PatientView {
  cohort::PatientRecord record;
  imputer::ImputationDistribution imputed;
  predictor::Sequence sequence;
  std::vector<uncertainty::UncertaintyReport> reports;
};

struct Snapshot {
  std::vector<std::shared_ptr<const PatientView>> patients;
  std::map<std::string, std::size_t> index;
};

struct Observation {
  std::string patient;
  double hour = 0.0;
  std::string variable;
  double value = 0.0;
};

inline json to_json(const Observation& o) {
  return {{"patient", o.patient}, {"hour", o.hour}, {"variable", o.variable}, {"value", o.value}};
}

struct ServiceOptions {
  uncertainty::ReportOptions report;
  std::string observation_log;  // JSON lines replayed at startup; empty = in memory only
  std::string audit_log;        // JSON lines with a timestamp per mutation; empty = none
  std::size_t workers = 1;      // threads used for the initial scoring
};

class CohortService {
 public:
  CohortService() = default;

  /// Scores `cohort`, then replays the observation log over it.
  CohortService(harness::ModelBundle models, predictor::TrainingMode mode, const cohort::Cohort& cohort,
                ServiceOptions opt)
      : models_(std::make_shared<harness::ModelBundle>(std::move(models))), mode_(mode), opt_(std::move(opt)) {
    (void)models_->model(mode_);  // fail early when the bundle lacks the variant
    for (std::size_t j = 0; j < models_->schema.size(); ++j) variables_[models_->schema.names[j]] = j;
    auto snap = std::make_shared<Snapshot>();
    snap->patients.resize(cohort.size());
    for (std::size_t n = 0; n < cohort.size(); ++n) {
      if (!snap->index.emplace(cohort[n].id, n).second) {
        throw std::invalid_argument("service: duplicate patient id " + cohort[n].id);
      }
    }
    const std::size_t workers = std::max<std::size_t>(1, std::min(opt_.workers, cohort.size()));
    std::vector<std::exception_ptr> errors(workers);
    auto work = [&](std::size_t w) {
      try {
        for (std::size_t n = w; n < cohort.size(); n += workers) snap->patients[n] = score(cohort[n]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
    work(0);
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    snapshot_ = std::move(snap);
    replay();
  }

  [[nodiscard]] bool loaded() const { return static_cast<bool>(snapshot()); }

  [[nodiscard]] std::shared_ptr<const Snapshot> snapshot() const {
    std::lock_guard<std::mutex> g(swap_);
    return snapshot_;
  }

  [[nodiscard]] json patients() const {
    const auto snap = require();
    json out = json::array();
    for (const auto& p : snap->patients) {
      const auto& last = p->reports.back();
      out.push_back({{"id", p->record.id},
                     {"latest_risk", last.risk},
                     {"latest_U", last.U},
                     {"risk_tier", risk_tier(last.risk)}});
    }
    return out;
  }

  [[nodiscard]] json trajectory(const std::string& id) const {
    const auto snap = require();
    return trajectory_json(*find(*snap, id));
  }

  [[nodiscard]] json recommendations(const std::string& id, double hour, std::optional<long long> top) const {
    const auto snap = require();
    const auto& p = *find(*snap, id);
    const std::size_t i = collection(p, hour);
    const auto unobserved = sensing::unobserved_at(p.record, i);
    if (top && *top < 0) throw ServiceError(422, "invalid_top", "top must be non-negative");
    const std::size_t m = top ? std::min<std::size_t>(static_cast<std::size_t>(*top), unobserved.size()) : unobserved.size();
    const auto& r = p.reports[i];
    json items = json::array();
    for (auto j : sensing::select_variables(r, unobserved, m)) {
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      items.push_back({{"variable", models_->schema.names[j]},
                       {"expected_reduction", r.per_variable[j]},
                       {"mu", p.imputed.mu(ii, jj)},
                       {"sigma", p.imputed.sigma(ii, jj)}});
    }
    return {{"id", id}, {"hour", p.record.times[i]}, {"items", items}};
  }

  /// Counterfactual reveal of `selected` at their imputed means. Reads only.
  [[nodiscard]] json whatif(const std::string& id, double hour, const std::vector<std::string>& selected) const {
    const auto snap = require();
    const auto& p = *find(*snap, id);
    const std::size_t i = collection(p, hour);
    const auto ii = static_cast<Eigen::Index>(i);
    Array sigma = p.sequence.sigma.row(ii);
    std::set<std::size_t> seen;
    for (const auto& name : selected) {
      const std::size_t j = variable(name);
      if (!seen.insert(j).second) throw ServiceError(422, "duplicate_variable", "variable " + name + " selected twice");
      if (p.record.observed(ii, static_cast<Eigen::Index>(j))) {
        throw ServiceError(409, "already_observed",
                           "variable " + name + " is already observed at hour " + cohort::format_value(p.record.times[i]),
                           {{"variable", name}});
      }
      sigma(0, static_cast<Eigen::Index>(j)) = 0.0;
    }
    const auto& before = p.reports[i];
    uncertainty::UncertaintyReport after = before;
    if (!seen.empty()) after = report_at(p, i, sigma);
    auto side = [](const uncertainty::UncertaintyReport& r) {
      const auto [lo, hi] = risk_band(r.risk, r.U);
      return json{{"risk", r.risk}, {"U_x", r.U_x}, {"U_w", r.U_w}, {"U", r.U}, {"band_low", lo}, {"band_high", hi}};
    };
    return {{"id", id}, {"hour", p.record.times[i]}, {"selected", selected}, {"before", side(before)},
            {"after", side(after)}};
  }

  /// Records a measured value and rescores the patient. Returns the new trajectory.
  json observe(const Observation& o) {
    std::lock_guard<std::mutex> w(writer_);
    const auto snap = require();
    auto next = apply(*snap, o);
    if (!opt_.observation_log.empty()) append_line(opt_.observation_log, to_json(o));
    if (!opt_.audit_log.empty()) {
      json a = to_json(o);
      a["timestamp"] = timestamp();
      a["action"] = "observe";
      append_line(opt_.audit_log, a);
    }
    const auto& view = *next->patients[next->index.at(o.patient)];
    json out = trajectory_json(view);
    {
      std::lock_guard<std::mutex> g(swap_);
      snapshot_ = std::move(next);
    }
    return out;
  }

  [[nodiscard]] const cohort::VariableSchema& schema() const { return models_->schema; }

 private:
  std::shared_ptr<harness::ModelBundle> models_;
  predictor::TrainingMode mode_ = predictor::TrainingMode::ras;
  ServiceOptions opt_;
  std::map<std::string, std::size_t> variables_;
  mutable std::mutex swap_;
  std::mutex writer_;
  std::shared_ptr<const Snapshot> snapshot_;

  [[nodiscard]] std::shared_ptr<const Snapshot> require() const {
    auto s = snapshot();
    if (!s) throw ServiceError(503, "no_cohort", "no cohort loaded");
    return s;
  }

  static const PatientView* find(const Snapshot& s, const std::string& id) {
    const auto it = s.index.find(id);
    if (it == s.index.end()) throw ServiceError(404, "unknown_patient", "no patient with id " + id);
    return s.patients[it->second].get();
  }

  static std::size_t collection(const PatientView& p, double hour) {
    if (!std::isfinite(hour)) throw ServiceError(422, "invalid_hour", "hour must be a finite number");
    const auto& t = p.record.times;
    const auto it = std::find(t.begin(), t.end(), hour);
    if (it == t.end()) {
      throw ServiceError(422, "invalid_hour", "patient " + p.record.id + " has no collection at hour " +
                                                  cohort::format_value(hour));
    }
    return static_cast<std::size_t>(it - t.begin());
  }

  [[nodiscard]] std::size_t variable(const std::string& name) const {
    const auto it = variables_.find(name);
    if (it == variables_.end()) throw ServiceError(422, "unknown_variable", "no variable named " + name);
    return it->second;
  }

  [[nodiscard]] std::uint64_t point_seed(const PatientView& p, std::size_t i) const {
    return util::derive_seed(opt_.report.seed, {util::stable_hash(p.record.id), i});
  }

  [[nodiscard]] uncertainty::UncertaintyReport report_at(const PatientView& p, std::size_t i, const Array& sigma) const {
    const auto& m = models_->model(mode_);
    const auto ii = static_cast<Eigen::Index>(i);
    const auto prev = m.prefix_state(p.sequence.x, p.sequence.times, i);
    return uncertainty::point_report(m, prev, p.sequence.x.row(ii), sigma, p.sequence.times[i], models_->rho, opt_.report,
                                     point_seed(p, i))
        .report;
  }

  [[nodiscard]] std::shared_ptr<const PatientView> score(cohort::PatientRecord r) const {
    if (r.size() == 0) throw std::invalid_argument("service: record " + r.id + " has no collections");
    auto v = std::make_shared<PatientView>();
    v->record = std::move(r);
    v->imputed = models_->imputer.impute(v->record);
    v->sequence = predictor::make_sequence(v->record, v->imputed);
    const auto& m = models_->model(mode_);
    auto state = m.initial_state(1);
    for (std::size_t i = 0; i < v->sequence.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      auto pr = uncertainty::point_report(m, state, v->sequence.x.row(ii), v->sequence.sigma.row(ii),
                                          v->sequence.times[i], models_->rho, opt_.report, point_seed(*v, i));
      v->reports.push_back(std::move(pr.report));
      state = std::move(pr.next);
    }
    return v;
  }

  /// New snapshot with `o` applied. Validation errors leave the current one untouched.
  [[nodiscard]] std::shared_ptr<Snapshot> apply(const Snapshot& s, const Observation& o) const {
    const auto& p = *find(s, o.patient);
    const std::size_t i = collection(p, o.hour);
    const std::size_t j = variable(o.variable);
    if (!std::isfinite(o.value)) throw ServiceError(422, "invalid_value", "value must be a finite number");
    cohort::PatientRecord r = p.record;
    try {
      sensing::reveal(r, i, j, [&](const cohort::PatientRecord&, std::size_t, std::size_t) { return o.value; });
    } catch (const sensing::AlreadyObserved&) {
      throw ServiceError(409, "already_observed",
                         "variable " + o.variable + " is already observed at hour " + cohort::format_value(o.hour) +
                             " for patient " + o.patient,
                         {{"variable", o.variable}});
    }
    auto next = std::make_shared<Snapshot>(s);
    next->patients[s.index.at(o.patient)] = score(std::move(r));
    return next;
  }

  [[nodiscard]] json trajectory_json(const PatientView& p) const {
    json hours = json::array();
    const auto& names = models_->schema.names;
    for (std::size_t i = 0; i < p.record.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const auto& r = p.reports[i];
      const auto [lo, hi] = risk_band(r.risk, r.U);
      json observed = json::array();
      json mu = json::object(), sigma = json::object();
      for (std::size_t j = 0; j < names.size(); ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        const bool seen = p.record.observed(ii, jj);
        if (seen) observed.push_back(names[j]);
        mu[names[j]] = seen ? p.record.values(ii, jj) : p.imputed.mu(ii, jj);
        sigma[names[j]] = seen ? 0.0 : p.imputed.sigma(ii, jj);
      }
      hours.push_back({{"hour", p.record.times[i]}, {"risk", r.risk},   {"U_x", r.U_x},
                       {"U_w", r.U_w},             {"U", r.U},          {"band_low", lo},
                       {"band_high", hi},          {"observed", observed}, {"mu", mu},
                       {"sigma", sigma}});
    }
    return {{"id", p.record.id}, {"hours", hours}};
  }

  void replay() {
    if (opt_.observation_log.empty()) return;
    std::ifstream is(opt_.observation_log);
    if (!is) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto j = json::parse(line);
        const Observation o{j.at("patient").get<std::string>(), j.at("hour").get<double>(),
                            j.at("variable").get<std::string>(), j.at("value").get<double>()};
        snapshot_ = apply(*snapshot_, o);
      } catch (const std::exception& e) {
        throw std::runtime_error(opt_.observation_log + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  static void append_line(const std::string& path, const json& j) {
    std::ofstream os(path, std::ios::app);
    os << j.dump() << '\n';
    os.flush();
    if (!os) throw ServiceError(500, "persistence_failed", "cannot append to " + path);
  }

  static std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
  }
};

}  // namespace ras::service
