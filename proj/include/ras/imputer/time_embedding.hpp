#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "ras/tensor/tape.hpp"

namespace ras::imputer {

using tensor::Array;

/// Sinusoidal embedding of an observation time: [sin(t*j/(T_max*d)) | cos(t*j/(T_max*d))], j < d.
inline Array time_embed(double t_hours, std::size_t d, double t_max) {
  if (!(t_max > 0.0)) throw std::invalid_argument("time_embed: T_max must be positive, got " + std::to_string(t_max));
  if (d == 0) throw std::invalid_argument("time_embed: d must be positive");
  Array e(1, static_cast<Eigen::Index>(2 * d));
  const double denom = t_max * static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double a = t_hours * static_cast<double>(j) / denom;
    e(0, static_cast<Eigen::Index>(j)) = std::sin(a);
    e(0, static_cast<Eigen::Index>(d + j)) = std::cos(a);
  }
  return e;
}

}  // namespace ras::imputer
