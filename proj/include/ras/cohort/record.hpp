#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ras/cohort/schema.hpp"
#include "ras/tensor/tape.hpp"

namespace ras::cohort {

using tensor::Array;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One admission. Unobserved cells of `values` hold 0 and carry no meaning;
/// `observed` is the only missingness marker.
struct PatientRecord {
  std::string id;
  std::vector<double> times;        // hours since admission, strictly increasing
  Array values;                     // n x k
  Mask observed;                    // n x k
  std::vector<std::uint8_t> labels; // onset within the next 4 hours
  std::optional<Array> truth;       // noise-free generative values (synthetic records only)

  [[nodiscard]] std::size_t size() const noexcept { return times.size(); }
  [[nodiscard]] std::size_t width() const noexcept { return static_cast<std::size_t>(values.cols()); }
  [[nodiscard]] bool synthetic() const noexcept { return truth.has_value(); }
  [[nodiscard]] bool septic() const {
    for (auto y : labels) {
      if (y) return true;
    }
    return false;
  }

  [[nodiscard]] std::size_t unobserved_count(std::size_t i) const {
    return static_cast<std::size_t>(observed.cols() - observed.row(static_cast<Eigen::Index>(i)).count());
  }

  void validate(const VariableSchema& schema) const {
    const auto n = static_cast<Eigen::Index>(times.size());
    const auto k = static_cast<Eigen::Index>(schema.size());
    if (values.rows() != n || values.cols() != k || observed.rows() != n || observed.cols() != k ||
        labels.size() != times.size()) {
      throw std::invalid_argument("record " + id + ": inconsistent dimensions");
    }
    if (truth && (truth->rows() != n || truth->cols() != k)) {
      throw std::invalid_argument("record " + id + ": truth has wrong shape");
    }
    for (Eigen::Index i = 1; i < n; ++i) {
      if (!(times[i] > times[i - 1])) {
        throw std::invalid_argument("record " + id + ": timestamps not strictly increasing at collection " +
                                    std::to_string(i + 1));
      }
    }
  }
};

using Cohort = std::vector<PatientRecord>;

/// Noise-free value of variable j at collection i; only synthetic records carry it.
inline double true_conditional(const PatientRecord& p, std::size_t i, std::size_t j) {
  if (!p.truth) {
    throw std::logic_error("true_conditional: record " + p.id + " is not synthetic");
  }
  if (i >= p.size() || j >= p.width()) {
    throw std::out_of_range("true_conditional: cell (" + std::to_string(i) + "," + std::to_string(j) +
                            ") outside record " + p.id);
  }
  return (*p.truth)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
}

}  // namespace ras::cohort
