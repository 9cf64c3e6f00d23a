#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>

#include "ras/cohort/record.hpp"

namespace ras::cohort {

struct CohortSplit {
  Cohort train;
  Cohort validation;
  Cohort test;
};

/// Partitions patients (never collections) into train/validation/test.
inline CohortSplit split_cohort(const Cohort& cohort, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions) {
    if (!(f > 0.0)) throw std::invalid_argument("split_cohort: every fraction must be positive");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split_cohort: fractions must sum to 1");
  }
  std::vector<std::size_t> order(cohort.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const double n = static_cast<double>(cohort.size());
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
  const auto n_val = std::min(cohort.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
  CohortSplit s;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const PatientRecord& p = cohort[order[r]];
    if (r < n_train) {
      s.train.push_back(p);
    } else if (r < n_train + n_val) {
      s.validation.push_back(p);
    } else {
      s.test.push_back(p);
    }
  }
  return s;
}

}  // namespace ras::cohort
