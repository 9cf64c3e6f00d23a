#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ras/cohort/generator.hpp"
#include "ras/harness/pipeline.hpp"

namespace ras::harness {

inline constexpr const char* kMetricsHeader = "policy,budget,seed,auroc,mean_ux,mean_uw,latency_ms";

struct MetricsRow {
  sensing::PolicyKind policy = sensing::PolicyKind::ras;
  double budget = 0.0;
  std::uint64_t seed = 0;
  double auroc = 0.0;
  double mean_ux = 0.0;
  double mean_uw = 0.0;
  double latency_ms = 0.0;
  bool failed = false;
};

inline std::string format_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

/// Row identity: policy, budget and seed as they appear in the CSV.
inline std::string cell_key(sensing::PolicyKind k, double budget, std::uint64_t seed) {
  return to_string(k) + "," + format_metric(budget) + "," + std::to_string(seed);
}

inline std::string to_csv_line(const MetricsRow& r) {
  std::string s = cell_key(r.policy, r.budget, r.seed);
  if (r.failed) return s + ",failed,failed,failed,failed";
  return s + "," + format_metric(r.auroc) + "," + format_metric(r.mean_ux) + "," + format_metric(r.mean_uw) + "," +
         format_metric(r.latency_ms);
}

/// Completed cells of a metrics CSV. Failed rows are dropped so a rerun retries them.
inline std::vector<MetricsRow> read_metrics(std::istream& is) {
  std::vector<MetricsRow> out;
  std::string line;
  if (!std::getline(is, line)) return out;
  if (line != kMetricsHeader) throw std::runtime_error("metrics csv: unexpected header '" + line + "'");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw std::runtime_error("metrics csv: line " + std::to_string(lineno) + " needs 7 fields");
    if (f[3] == "failed") continue;
    MetricsRow r;
    try {
      r.policy = sensing::policy_from_string(f[0]);
      r.budget = std::stod(f[1]);
      r.seed = std::stoull(f[2]);
      r.auroc = std::stod(f[3]);
      r.mean_ux = std::stod(f[4]);
      r.mean_uw = std::stod(f[5]);
      r.latency_ms = std::stod(f[6]);
    } catch (const std::logic_error& e) {
      throw std::runtime_error("metrics csv: line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(r);
  }
  return out;
}

inline std::vector<MetricsRow> read_metrics_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) return {};
  return read_metrics(is);
}

inline void write_metrics(std::ostream& os, const std::vector<MetricsRow>& rows) {
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) os << to_csv_line(r) << '\n';
}

/// Replaces `path` in one rename so an interrupted sweep never leaves a torn table.
inline void write_metrics_file(const std::string& path, const std::vector<MetricsRow>& rows) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    write_metrics(os, rows);
  }
  std::filesystem::rename(tmp, path);
}

struct SweepResult {
  std::vector<MetricsRow> rows;  // canonical order: policy, budget, seed as configured
  std::size_t computed = 0;      // cells evaluated in this call
  std::size_t reused = 0;        // cells taken from an earlier run
  std::size_t failed = 0;
  double seconds = 0.0;
};

/// Policy x budget x seed grid on the test split. Completed cells in
/// `<out>/metrics.csv` are kept; models are cached under `<out>/models`.
inline SweepResult sensing_sweep(const ExperimentConfig& cfg, const std::string& out_dir,
                                 std::ostream* log = nullptr, const sensing::Oracle& oracle = sensing::synthetic_oracle) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out_dir);
  const std::string csv = out_dir + "/metrics.csv";

  std::map<std::string, MetricsRow> done;
  for (const auto& r : read_metrics_file(csv)) done[cell_key(r.policy, r.budget, r.seed)] = r;

  std::map<std::string, MetricsRow> results;
  SweepResult res;
  auto ordered = [&] {
    std::vector<MetricsRow> rows;
    for (auto k : cfg.policies) {
      for (double b : cfg.budgets) {
        for (auto s : cfg.seeds) {
          const auto it = results.find(cell_key(k, b, s));
          if (it != results.end()) rows.push_back(it->second);
        }
      }
    }
    return rows;
  };

  std::optional<cohort::CohortSplit> split;
  for (auto seed : cfg.seeds) {
    std::vector<std::pair<sensing::PolicyKind, double>> todo;
    for (auto k : cfg.policies) {
      for (double b : cfg.budgets) {
        const auto key = cell_key(k, b, seed);
        if (const auto it = done.find(key); it != done.end()) {
          results[key] = it->second;
          ++res.reused;
        } else {
          todo.emplace_back(k, b);
        }
      }
    }
    if (todo.empty()) continue;
    if (!split) split = split_for(cfg, cohort::generate_cohort(cfg.cohort));
    if (log) *log << "seed " << seed << ": preparing models" << std::endl;
    const ModelBundle bundle = bundle_for_seed(cfg, *split, seed, out_dir + "/models");
    uncertainty::ReportOptions report = cfg.report;
    report.seed = util::derive_seed(seed, {util::stable_hash("report"), cfg.report.seed});
    for (const auto& [kind, budget] : todo) {
      MetricsRow row;
      row.policy = kind;
      row.budget = budget;
      row.seed = seed;
      try {
        sensing::SensingPolicy pol;
        pol.kind = kind;
        pol.budget = budget;
        pol.mc_samples = cfg.mc_samples;
        pol.seed = util::derive_seed(seed, {util::stable_hash("policy")});
        const auto r = sensing::evaluate_policy(split->test, pol, bundle.episode_models(cfg.model_for(kind), report),
                                                cfg.workers, oracle);
        row.auroc = r.auroc;
        row.mean_ux = r.mean_ux;
        row.mean_uw = r.mean_uw;
        row.latency_ms = r.latency_ms;
        ++res.computed;
      } catch (const std::exception& e) {
        row.failed = true;
        ++res.failed;
        if (log) *log << "cell " << cell_key(kind, budget, seed) << " failed: " << e.what() << std::endl;
      }
      results[cell_key(kind, budget, seed)] = row;
      if (log && !row.failed) *log << to_csv_line(row) << std::endl;
      write_metrics_file(csv, ordered());
    }
  }
  res.rows = ordered();
  if (!std::filesystem::exists(csv) || res.computed + res.failed > 0) write_metrics_file(csv, res.rows);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

struct SweepCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct PolicySummary {
  double auroc = 0.0, mean_ux = 0.0, latency_ms = 0.0;
  std::size_t n = 0;
};

/// Per-(policy, budget) means over seeds; failed cells excluded.
inline std::map<std::pair<sensing::PolicyKind, double>, PolicySummary> summarize(const std::vector<MetricsRow>& rows) {
  std::map<std::pair<sensing::PolicyKind, double>, PolicySummary> out;
  for (const auto& r : rows) {
    if (r.failed) continue;
    auto& s = out[{r.policy, r.budget}];
    s.auroc += r.auroc;
    s.mean_ux += r.mean_ux;
    s.latency_ms += r.latency_ms;
    ++s.n;
  }
  for (auto& [k, s] : out) {
    s.auroc /= static_cast<double>(s.n);
    s.mean_ux /= static_cast<double>(s.n);
    s.latency_ms /= static_cast<double>(s.n);
  }
  return out;
}

/// Ordering and monotonicity checks over a finished sweep table.
inline std::vector<SweepCheck> check_sweep(const ExperimentConfig& cfg, const std::vector<MetricsRow>& rows,
                                           double latency_factor = 1.0) {
  using sensing::PolicyKind;
  std::vector<SweepCheck> out;
  const auto sum = summarize(rows);
  auto has = [&](PolicyKind k) { return std::find(cfg.policies.begin(), cfg.policies.end(), k) != cfg.policies.end(); };
  auto mean = [&](PolicyKind k, double b) {
    const auto it = sum.find({k, b});
    return it == sum.end() ? std::nan("") : it->second.auroc;
  };

  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.failed ? 1 : 0;
  const std::size_t expected = cfg.policies.size() * cfg.budgets.size() * cfg.seeds.size();
  out.push_back({"grid complete", failed == 0 && rows.size() == expected,
                 std::to_string(rows.size() - failed) + " of " + std::to_string(expected) + " cells"});

  // Pairwise AUROC orderings: every gap >= 0, at most one exact tie overall.
  const std::vector<std::pair<PolicyKind, PolicyKind>> pairs{
      {PolicyKind::ras, PolicyKind::ras_l}, {PolicyKind::ras_l, PolicyKind::random}, {PolicyKind::ras, PolicyKind::mc_sampling}};
  std::size_t ties = 0;
  bool any_pair = false;
  std::ostringstream gaps;
  bool ordered = true;
  for (const auto& [hi, lo] : pairs) {
    if (!has(hi) || !has(lo)) continue;
    any_pair = true;
    for (double b : cfg.budgets) {
      const double gap = mean(hi, b) - mean(lo, b);
      if (!(gap >= 0.0)) ordered = false;
      if (gap == 0.0) ++ties;
      gaps << " " << to_string(hi) << "-" << to_string(lo) << "@" << format_metric(b) << "=" << format_metric(gap);
    }
  }
  if (any_pair) out.push_back({"auroc ordering ras >= ras_l >= random, ras >= mc_sampling", ordered && ties <= 1,
                               "ties=" + std::to_string(ties) + gaps.str()});

  for (auto k : cfg.policies) {
    std::size_t inversions = 0;
    bool small = true;
    std::ostringstream d;
    for (std::size_t i = 1; i < cfg.budgets.size(); ++i) {
      const double drop = mean(k, cfg.budgets[i - 1]) - mean(k, cfg.budgets[i]);
      d << " " << format_metric(mean(k, cfg.budgets[i - 1]));
      if (drop > 0.0) {
        ++inversions;
        if (drop > 0.005) small = false;
      }
    }
    d << " " << format_metric(mean(k, cfg.budgets.back()));
    out.push_back({"auroc non-decreasing in budget: " + to_string(k), inversions <= 1 && small, "auroc" + d.str()});
  }

  if (has(PolicyKind::ras) && has(PolicyKind::mc_sampling)) {
    double ras = 0.0, mc = 0.0;
    for (double b : cfg.budgets) {
      ras += sum.count({PolicyKind::ras, b}) ? sum.at({PolicyKind::ras, b}).latency_ms : std::nan("");
      mc += sum.count({PolicyKind::mc_sampling, b}) ? sum.at({PolicyKind::mc_sampling, b}).latency_ms : std::nan("");
    }
    std::ostringstream d;
    d << "ras " << format_metric(ras / static_cast<double>(cfg.budgets.size())) << " ms, mc_sampling "
      << format_metric(mc / static_cast<double>(cfg.budgets.size())) << " ms per decision";
    out.push_back({latency_factor > 1.0 ? "ras scoring at least " + format_metric(latency_factor) + "x faster than mc_sampling"
                                        : "ras scoring faster than mc_sampling",
                   ras * latency_factor < mc, d.str()});
  }

  if (has(PolicyKind::ras) && has(PolicyKind::random)) {
    const double b = cfg.budgets.back();
    std::size_t wins = 0, paired = 0;
    for (auto s : cfg.seeds) {
      const MetricsRow *a = nullptr, *r = nullptr;
      for (const auto& row : rows) {
        if (row.failed || row.seed != s || row.budget != b) continue;
        if (row.policy == PolicyKind::ras) a = &row;
        if (row.policy == PolicyKind::random) r = &row;
      }
      if (a && r) {
        ++paired;
        wins += a->mean_ux < r->mean_ux ? 1 : 0;
      }
    }
    const std::size_t need = (4 * paired + 4) / 5;
    out.push_back({"mean U_x after ras below random at budget " + format_metric(b), paired > 0 && wins >= need,
                   std::to_string(wins) + " of " + std::to_string(paired) + " seeds"});
  }
  return out;
}

}  // namespace ras::harness
