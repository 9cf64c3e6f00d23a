#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "ras/harness/auroc.hpp"
#include "ras/harness/sweep.hpp"
#include "ras/uncertainty/report.hpp"

namespace ras::harness {

/// One scored collection.
struct ScoredPoint {
  std::size_t patient = 0;
  double hour = 0.0;
  bool label = false;
  double risk = 0.0;
  double U_x = 0.0;
  double U_w = 0.0;
  [[nodiscard]] double U() const noexcept { return U_x + U_w; }
};

/// Risk and uncertainty at every collection of every patient, patient-major.
/// Seeds depend on the patient id, so results do not depend on `workers`.
inline std::vector<ScoredPoint> score_cohort(const cohort::Cohort& c, const imputer::Imputer& imp,
                                             const predictor::RiskModel& m, const uncertainty::CorrelationMatrix& rho,
                                             const uncertainty::ReportOptions& opt, std::size_t workers = 1) {
  opt.validate();
  std::vector<std::vector<ScoredPoint>> per(c.size());
  workers = std::max<std::size_t>(1, std::min(workers, c.size()));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t n = w; n < c.size(); n += workers) {
        const auto& p = c[n];
        const auto s = predictor::make_sequence(p, imp.impute(p));
        auto state = m.initial_state(1);
        for (std::size_t i = 0; i < s.size(); ++i) {
          const auto ii = static_cast<Eigen::Index>(i);
          auto pr = uncertainty::point_report(m, state, s.x.row(ii), s.sigma.row(ii), s.times[i], rho, opt,
                                              util::derive_seed(opt.seed, {util::stable_hash(p.id), i}));
          per[n].push_back({n, p.times[i], p.labels[i] != 0, pr.report.risk, pr.report.U_x, pr.report.U_w});
          state = std::move(pr.next);
        }
      }
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
  std::vector<ScoredPoint> out;
  for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
  return out;
}

/// Spearman rank correlation; tied values share their average rank.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("spearman: need at least two pairs");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i] / n;
    mb += rb[i] / n;
  }
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw std::invalid_argument("spearman: constant input");
  return sab / std::sqrt(saa * sbb);
}

struct UncertaintyBin {
  double lower = 0.0, upper = 0.0;
  std::size_t points = 0, positives = 0;
  double mean_U = 0.0;
  std::optional<double> auroc;  // absent when the bin holds one class only
};

struct BinsTable {
  std::vector<UncertaintyBin> bins;
  std::optional<double> spearman;  // over bins with both a point and an AUROC
};

/// Equal-width bins over total U of the pooled points, AUROC per bin.
inline BinsTable uncertainty_bins(const std::vector<ScoredPoint>& pts, std::size_t n_bins) {
  if (n_bins == 0) throw std::invalid_argument("uncertainty_bins: need at least one bin");
  if (pts.empty()) throw std::invalid_argument("uncertainty_bins: no points");
  double lo = pts.front().U(), hi = lo;
  for (const auto& p : pts) {
    lo = std::min(lo, p.U());
    hi = std::max(hi, p.U());
  }
  const double width = (hi - lo) / static_cast<double>(n_bins);
  std::vector<std::vector<const ScoredPoint*>> members(n_bins);
  for (const auto& p : pts) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((p.U() - lo) / width) : 0;
    members[std::min(b, n_bins - 1)].push_back(&p);
  }
  BinsTable t;
  std::vector<double> u, a;
  for (std::size_t b = 0; b < n_bins; ++b) {
    UncertaintyBin bin;
    bin.lower = lo + width * static_cast<double>(b);
    bin.upper = b + 1 == n_bins ? hi : lo + width * static_cast<double>(b + 1);
    bin.points = members[b].size();
    std::vector<double> scores;
    std::vector<bool> labels;
    for (const auto* p : members[b]) {
      bin.mean_U += p->U();
      bin.positives += p->label ? 1 : 0;
      scores.push_back(p->risk);
      labels.push_back(p->label);
    }
    if (bin.points) bin.mean_U /= static_cast<double>(bin.points);
    if (bin.positives > 0 && bin.positives < bin.points) {
      bin.auroc = auroc(scores, labels);
      u.push_back(bin.mean_U);
      a.push_back(*bin.auroc);
    }
    t.bins.push_back(bin);
  }
  if (u.size() >= 2) {
    try {
      t.spearman = spearman(u, a);
    } catch (const std::invalid_argument&) {
      // constant AUROC column: correlation undefined
    }
  }
  return t;
}

inline void write_bins_csv(std::ostream& os, const BinsTable& t) {
  os << "bin,u_lower,u_upper,mean_u,points,positives,auroc\n";
  for (std::size_t b = 0; b < t.bins.size(); ++b) {
    const auto& r = t.bins[b];
    os << b << ',' << format_metric(r.lower) << ',' << format_metric(r.upper) << ',' << format_metric(r.mean_U) << ','
       << r.points << ',' << r.positives << ',' << (r.auroc ? format_metric(*r.auroc) : "") << '\n';
  }
}

struct HourUncertainty {
  std::size_t hour = 0;  // 1 = admission collection
  std::size_t patients = 0;
  double mean_ux = 0.0;
  double mean_uw = 0.0;
};

/// Mean U_x and U_w per hour since admission. Records end at onset, so every
/// patient with a collection at an hour is still at risk there.
inline std::vector<HourUncertainty> uncertainty_over_time(const std::vector<ScoredPoint>& pts) {
  std::map<std::size_t, HourUncertainty> by;
  for (const auto& p : pts) {
    const auto h = static_cast<std::size_t>(std::floor(p.hour)) + 1;
    auto& r = by[h];
    r.hour = h;
    ++r.patients;
    r.mean_ux += p.U_x;
    r.mean_uw += p.U_w;
  }
  std::vector<HourUncertainty> out;
  for (auto& [h, r] : by) {
    r.mean_ux /= static_cast<double>(r.patients);
    r.mean_uw /= static_cast<double>(r.patients);
    out.push_back(r);
  }
  return out;
}

inline void write_over_time_csv(std::ostream& os, const std::vector<HourUncertainty>& rows) {
  os << "hour,patients,mean_ux,mean_uw\n";
  for (const auto& r : rows) {
    os << r.hour << ',' << r.patients << ',' << format_metric(r.mean_ux) << ',' << format_metric(r.mean_uw) << '\n';
  }
}

inline BinsTable uncertainty_bins_experiment(const ModelBundle& b, predictor::TrainingMode mode, const cohort::Cohort& c,
                                             const uncertainty::ReportOptions& opt, std::size_t n_bins,
                                             std::size_t workers = 1) {
  return uncertainty_bins(score_cohort(c, b.imputer, b.model(mode), b.rho, opt, workers), n_bins);
}

inline std::vector<HourUncertainty> uncertainty_over_time_experiment(const ModelBundle& b, predictor::TrainingMode mode,
                                                                     const cohort::Cohort& c,
                                                                     const uncertainty::ReportOptions& opt,
                                                                     std::size_t workers = 1) {
  return uncertainty_over_time(score_cohort(c, b.imputer, b.model(mode), b.rho, opt, workers));
}

}  // namespace ras::harness
