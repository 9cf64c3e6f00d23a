#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "ras/cohort/record.hpp"

namespace ras::imputer {

/// Per-variable z-scoring fitted on observed training values.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> sd;

  static Standardizer fit(const cohort::Cohort& train, std::size_t k) {
    Standardizer s;
    s.mean.assign(k, 0.0);
    s.sd.assign(k, 1.0);
    std::vector<double> sum(k, 0.0), sq(k, 0.0), n(k, 0.0);
    for (const auto& p : train) {
      for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const auto ji = static_cast<Eigen::Index>(j);
          if (!p.observed(i, ji)) continue;
          const double v = p.values(i, ji);
          sum[j] += v;
          sq[j] += v * v;
          n[j] += 1.0;
        }
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (n[j] < 2.0) continue;
      s.mean[j] = sum[j] / n[j];
      const double var = std::max(0.0, sq[j] / n[j] - s.mean[j] * s.mean[j]);
      s.sd[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  [[nodiscard]] double forward(std::size_t j, double v) const { return (v - mean[j]) / sd[j]; }
  [[nodiscard]] double inverse(std::size_t j, double z) const { return mean[j] + sd[j] * z; }

  [[nodiscard]] nlohmann::json to_json() const { return {{"mean", mean}, {"sd", sd}}; }
  static Standardizer from_json(const nlohmann::json& j) {
    Standardizer s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.sd = j.at("sd").get<std::vector<double>>();
    if (s.mean.size() != s.sd.size()) throw std::invalid_argument("standardizer: length mismatch");
    return s;
  }
};

}  // namespace ras::imputer
