#pragma once

// Synthetic admissions with a known latent-linear generative process.
//
// Each patient carries a smooth latent trajectory z_t (baseline + deterioration
// drift + AR(1) wander). The drift is spread over organ systems with
// patient-specific weights. Every variable is a fixed linear read-out of z_t plus
// Gaussian noise, so noise-free values and cross-variable correlations are
// known exactly. Sepsis onset is the first hour where a fixed linear score of
// z_t crosses a cohort-calibrated threshold.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ras/cohort/record.hpp"
#include "ras/cohort/schema.hpp"

namespace ras::cohort {

enum class MissingnessMode { uniform, burst };

inline std::string to_string(MissingnessMode m) { return m == MissingnessMode::uniform ? "uniform" : "burst"; }

inline MissingnessMode missingness_from_string(const std::string& s) {
  if (s == "uniform") return MissingnessMode::uniform;
  if (s == "burst") return MissingnessMode::burst;
  throw std::invalid_argument("unknown missingness mode '" + s + "'");
}

struct GeneratorConfig {
  std::uint64_t seed = 7;
  std::size_t n_patients = 1000;
  double sepsis_rate = 0.32;
  std::size_t latent_dim = 7;
  std::vector<double> noise_scale;  // per variable, standardized units; empty = defaults
  MissingnessMode missingness = MissingnessMode::uniform;
  bool cold_start = true;           // labs unavailable at the admission collection
  VariableSchema schema = sepsis_schema();

  void validate() const {
    if (n_patients == 0) throw std::invalid_argument("generator: n_patients must be positive");
    if (!(sepsis_rate > 0.0 && sepsis_rate < 1.0)) {
      throw std::invalid_argument("generator: sepsis_rate must lie in (0,1)");
    }
    if (latent_dim < 7) throw std::invalid_argument("generator: latent_dim must be at least 7");
    schema.validate();
    if (!noise_scale.empty() && noise_scale.size() != schema.size()) {
      throw std::invalid_argument("generator: noise_scale needs one entry per variable");
    }
    for (double s : noise_scale) {
      if (!(s >= 0.0 && s < 1.0)) throw std::invalid_argument("generator: noise scale outside [0,1)");
    }
  }
};

/// Fixed read-out map shared by every cohort with the same schema width.
struct Physiology {
  std::vector<double> mean;   // original units
  std::vector<double> scale;  // original units per standardized unit
  std::vector<double> noise;  // standardized noise std per variable
  Array loadings;             // k x latent_dim
  std::vector<double> score_direction;  // latent_dim
  std::vector<double> drift_direction;  // latent_dim

  /// Noise standard deviation of variable j in original units.
  [[nodiscard]] double noise_sd(std::size_t j) const { return noise[j] * scale[j]; }
};

namespace detail {

inline double round6(double v) { return std::round(v * 1e6) / 1e6; }

struct VariableProfile {
  double mean;
  double sd;
  int primary;  // latent axis that dominates this variable
  double sign;
};

// Clinical-scale centres and spreads. Axes: 0 haemodynamic, 1 respiratory,
// 2 inflammatory, 3 renal, 4 coagulation/haematology, 5 metabolic,
// 6 tissue perfusion (read almost only through lactate).
inline std::vector<VariableProfile> sepsis_profiles() {
  return {{85, 15, 0, 1},    {18, 4, 1, 1},     {37, 0.6, 2, 1},   {96, 2.5, 1, -1},
          {120, 18, 0, -1},  {65, 11, 0, -1},   {82, 12, 0, -1},   {130, 35, 5, 1},
          {24, 4, 5, -1},    {10, 4, 2, 1},     {5, 4, 2, 1},      {50, 40, 2, 1},
          {25, 15, 3, 1},    {13, 2.5, 5, -1},  {100, 60, 3, -1},  {1.3, 0.8, 3, 1},
          {220, 80, 4, -1},  {139, 4, 5, 1},    {10.5, 2, 4, -1},  {104, 5, 5, 1},
          {2.0, 1.2, 6, 1},  {1.3, 0.4, 4, 1},  {32, 8, 4, 1},     {2.0, 0.3, 3, 1},
          {13, 3.5, 5, 1},   {31, 6, 4, -1},    {14.5, 3, 4, 1}};
}

// Stationary latent variance per axis (baseline + AR component).
inline constexpr double kBaselineSd = 0.5;
inline constexpr double kWanderSd = 0.45;
inline constexpr double kWanderPhi = 0.92;

}  // namespace detail

inline Physiology make_physiology(const VariableSchema& schema, std::size_t latent_dim,
                                  const std::vector<double>& noise_scale = {}) {
  Physiology ph;
  const std::size_t k = schema.size();
  std::mt19937_64 rng(0x5EB515ULL);  // physiology is fixed across cohorts
  std::normal_distribution<double> nrm(0.0, 1.0);
  const auto profiles = detail::sepsis_profiles();
  ph.loadings = Array::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(latent_dim));
  const double latent_var = detail::kBaselineSd * detail::kBaselineSd + detail::kWanderSd * detail::kWanderSd;
  for (std::size_t j = 0; j < k; ++j) {
    const auto& prof = profiles[j % profiles.size()];
    ph.mean.push_back(prof.mean);
    ph.scale.push_back(prof.sd);
    double noise = noise_scale.empty() ? (schema.vital_flags[j] ? 0.3 : 0.2) : noise_scale[j];
    ph.noise.push_back(noise);
    Eigen::RowVectorXd row(static_cast<Eigen::Index>(latent_dim));
    for (std::size_t a = 0; a < latent_dim; ++a) row(static_cast<Eigen::Index>(a)) = 0.25 * nrm(rng);
    row(prof.primary) = prof.sign * (0.9 + 0.1 * std::abs(nrm(rng)));
    if (schema.vital_flags[j]) row(2) += 0.35 * prof.sign;  // vitals echo inflammation
    // scale the signal so each standardized variable has roughly unit variance
    const double target = std::sqrt(std::max(1e-6, 1.0 - noise * noise) / latent_var);
    row *= target / row.norm();
    ph.loadings.row(static_cast<Eigen::Index>(j)) = row;
  }
  ph.score_direction.assign(latent_dim, 0.0);
  ph.drift_direction.assign(latent_dim, 0.0);
  const double score[7] = {0.2, 0.1, 0.55, 0.45, 0.35, 0.5, 0.7};
  const double drift[7] = {0.35, 0.2, 0.6, 0.45, 0.3, 0.45, 0.6};
  for (std::size_t a = 0; a < 7; ++a) {
    ph.score_direction[a] = score[a];
    ph.drift_direction[a] = drift[a];
  }
  return ph;
}

/// Generates a cohort; the same config always yields the same cohort.
inline Cohort generate_cohort(const GeneratorConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.schema.size();
  const std::size_t L = cfg.latent_dim;
  const Physiology ph = make_physiology(cfg.schema, L, cfg.noise_scale);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nrm(0.0, 1.0);
  std::geometric_distribution<int> stay(1.0 / 24.0);

  struct Draft {
    int length = 0;
    Array latent;  // length x L
    std::vector<double> score;
  };
  std::vector<Draft> drafts(cfg.n_patients);
  std::vector<double> peak(cfg.n_patients);
  const double wander_innov = detail::kWanderSd * std::sqrt(1.0 - detail::kWanderPhi * detail::kWanderPhi);
  for (std::size_t p = 0; p < cfg.n_patients; ++p) {
    Draft& d = drafts[p];
    do {
      d.length = stay(rng) + 1;  // geometric on {1,2,...} with mean 24
    } while (d.length < 8 || d.length > 72);
    Eigen::RowVectorXd base(static_cast<Eigen::Index>(L)), wander(static_cast<Eigen::Index>(L));
    for (std::size_t a = 0; a < L; ++a) {
      base(static_cast<Eigen::Index>(a)) = detail::kBaselineSd * nrm(rng);
      wander(static_cast<Eigen::Index>(a)) = detail::kWanderSd * nrm(rng);
    }
    const double severity = std::max(0.0, nrm(rng)) * 1.5;
    // Which organ systems deteriorate differs by patient.
    std::exponential_distribution<double> organ(1.0);
    std::vector<double> pattern(L);
    double total = 0.0;
    for (std::size_t a = 0; a < L; ++a) total += pattern[a] = organ(rng);
    for (auto& w : pattern) w *= static_cast<double>(L) / total;
    d.latent.resize(d.length, static_cast<Eigen::Index>(L));
    d.score.resize(static_cast<std::size_t>(d.length));
    for (int t = 0; t < d.length; ++t) {
      if (t > 0) {
        for (std::size_t a = 0; a < L; ++a) {
          auto ai = static_cast<Eigen::Index>(a);
          wander(ai) = detail::kWanderPhi * wander(ai) + wander_innov * nrm(rng);
        }
      }
      double s = 0.0;
      for (std::size_t a = 0; a < L; ++a) {
        auto ai = static_cast<Eigen::Index>(a);
        const double z = base(ai) + wander(ai) + severity * (t / 24.0) * ph.drift_direction[a] * pattern[a];
        d.latent(t, ai) = z;
        s += ph.score_direction[a] * z;
      }
      d.score[static_cast<std::size_t>(t)] = s;
    }
    peak[p] = *std::max_element(d.score.begin() + 1, d.score.end());
  }

  // Threshold between the m-th and (m+1)-th largest peaks: exactly m septic patients.
  std::vector<double> sorted = peak;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const auto m = static_cast<std::size_t>(std::llround(cfg.sepsis_rate * static_cast<double>(cfg.n_patients)));
  double threshold;
  if (m == 0) {
    threshold = sorted.front() + 1.0;
  } else if (m >= sorted.size()) {
    threshold = sorted.back() - 1.0;
  } else {
    threshold = 0.5 * (sorted[m - 1] + sorted[m]);
  }

  Cohort cohort;
  cohort.reserve(cfg.n_patients);
  std::size_t total_rows = 0;
  for (std::size_t p = 0; p < cfg.n_patients; ++p) {
    Draft& d = drafts[p];
    int onset = -1;
    for (int t = 1; t < d.length; ++t) {
      if (d.score[static_cast<std::size_t>(t)] > threshold) {
        onset = t;
        break;
      }
    }
    const int n = onset > 0 ? onset : d.length;
    PatientRecord r;
    char buf[32];
    std::snprintf(buf, sizeof buf, "P%05zu", p + 1);
    r.id = buf;
    r.times.resize(static_cast<std::size_t>(n));
    r.labels.assign(static_cast<std::size_t>(n), 0);
    r.values = Array::Zero(n, static_cast<Eigen::Index>(k));
    r.observed = Mask::Constant(n, static_cast<Eigen::Index>(k), true);
    Array truth(n, static_cast<Eigen::Index>(k));
    for (int i = 0; i < n; ++i) {
      r.times[static_cast<std::size_t>(i)] = static_cast<double>(i);
      if (onset > 0 && i >= onset - 4) r.labels[static_cast<std::size_t>(i)] = 1;
      for (std::size_t j = 0; j < k; ++j) {
        auto ji = static_cast<Eigen::Index>(j);
        const double std_value = d.latent.row(i).dot(ph.loadings.row(ji));
        const double clean = detail::round6(ph.mean[j] + ph.scale[j] * std_value);
        truth(i, ji) = clean;
        r.values(i, ji) = detail::round6(clean + ph.noise_sd(j) * nrm(rng));
      }
    }
    r.truth = std::move(truth);
    total_rows += static_cast<std::size_t>(n);
    cohort.push_back(std::move(r));
  }

  // Missingness. With a cold start the admission collection has no labs, so
  // later collections are observed a little more often to hit the target rate.
  const double boost = cfg.cold_start
                           ? static_cast<double>(total_rows) / static_cast<double>(total_rows - cfg.n_patients)
                           : 1.0;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  // Burst mode: labs come in panels drawn at a shared per-collection rate,
  // high enough that the most frequently measured lab still meets its target.
  double draw_prob = 0.5;
  for (std::size_t j = 0; j < k; ++j) {
    if (!cfg.schema.vital_flags[j]) {
      draw_prob = std::max(draw_prob, std::min(1.0, (1.0 - cfg.schema.target_missing_rate[j]) * boost));
    }
  }
  for (auto& r : cohort) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const bool cold = cfg.cold_start && i == 0;
      const bool draw = cfg.missingness == MissingnessMode::uniform || unif(rng) < draw_prob;
      for (std::size_t j = 0; j < k; ++j) {
        if (cfg.schema.vital_flags[j]) continue;
        const auto ji = static_cast<Eigen::Index>(j);
        double p_obs = std::min(1.0, (1.0 - cfg.schema.target_missing_rate[j]) * boost);
        if (cfg.missingness == MissingnessMode::burst) p_obs = std::min(1.0, p_obs / draw_prob);
        const double u = unif(rng);
        const bool seen = !cold && draw && u < p_obs;
        if (!seen) {
          r.observed(ii, ji) = false;
          r.values(ii, ji) = 0.0;
        }
      }
    }
  }
  return cohort;
}

}  // namespace ras::cohort
