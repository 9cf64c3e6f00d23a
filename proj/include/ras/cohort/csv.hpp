#pragma once

// Cohort CSV: header `patient_id,t_hours,label,<variables in schema order>`,
// one row per collection, empty cell = missing, LF line endings.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ras/cohort/record.hpp"
#include "ras/cohort/schema.hpp"

namespace ras::cohort {

/// Raised on malformed cohort files; `row` is the 1-based data row (header excluded).
class CsvError : public std::runtime_error {
 public:
  CsvError(std::size_t row, const std::string& what)
      : std::runtime_error("cohort csv row " + std::to_string(row) + " (line " + std::to_string(row + 1) +
                           "): " + what),
        row_(row) {}
  [[nodiscard]] std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Shortest fixed-point text with at most six decimals.
inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s(buf);
  const auto dot = s.find('.');
  if (dot != std::string::npos) {
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}

inline void write_cohort(std::ostream& os, const Cohort& cohort, const VariableSchema& schema) {
  os << "patient_id,t_hours,label";
  for (const auto& n : schema.names) os << ',' << n;
  os << '\n';
  for (const auto& p : cohort) {
    p.validate(schema);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      os << p.id << ',' << format_value(p.times[i]) << ',' << static_cast<int>(p.labels[i]);
      for (std::size_t j = 0; j < schema.size(); ++j) {
        os << ',';
        const auto ji = static_cast<Eigen::Index>(j);
        if (p.observed(ii, ji)) os << format_value(p.values(ii, ji));
      }
      os << '\n';
    }
  }
}

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

inline double parse_double(std::string_view cell, std::size_t row, const std::string& column) {
  double v = 0.0;
  const auto* first = cell.data();
  const auto* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw CsvError(row, "column " + column + ": not a finite number: '" + std::string(cell) + "'");
  }
  return v;
}

}  // namespace detail

inline Cohort read_cohort(std::istream& is, const VariableSchema& schema) {
  std::string line;
  if (!std::getline(is, line)) throw CsvError(0, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "patient_id" || header[1] != "t_hours" || header[2] != "label") {
    throw CsvError(0, "header must start with patient_id,t_hours,label");
  }
  std::vector<std::size_t> column_var;
  std::vector<bool> seen(schema.size(), false);
  for (std::size_t c = 3; c < header.size(); ++c) {
    const std::string name(header[c]);
    std::size_t j = 0;
    try {
      j = schema.index_of(name);
    } catch (const std::out_of_range&) {
      throw CsvError(0, "unknown variable column '" + name + "'");
    }
    if (seen[j]) throw CsvError(0, "duplicate variable column '" + name + "'");
    seen[j] = true;
    column_var.push_back(j);
  }
  for (std::size_t j = 0; j < schema.size(); ++j) {
    if (!seen[j]) throw CsvError(0, "missing variable column '" + schema.names[j] + "'");
  }

  struct Row {
    double t;
    std::uint8_t label;
    std::vector<double> v;
    std::vector<bool> obs;
  };
  Cohort cohort;
  std::vector<Row> rows;
  std::string current;
  std::vector<std::string> finished;
  const auto k = static_cast<Eigen::Index>(schema.size());
  auto flush = [&] {
    if (rows.empty()) return;
    PatientRecord p;
    p.id = current;
    const auto n = static_cast<Eigen::Index>(rows.size());
    p.values = Array::Zero(n, k);
    p.observed = Mask::Constant(n, k, false);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Row& r = rows[static_cast<std::size_t>(i)];
      p.times.push_back(r.t);
      p.labels.push_back(r.label);
      for (Eigen::Index j = 0; j < k; ++j) {
        if (r.obs[static_cast<std::size_t>(j)]) {
          p.observed(i, j) = true;
          p.values(i, j) = r.v[static_cast<std::size_t>(j)];
        }
      }
    }
    cohort.push_back(std::move(p));
    finished.push_back(current);
    rows.clear();
  };

  std::size_t row_no = 0;
  while (std::getline(is, line)) {
    ++row_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw CsvError(row_no, "expected " + std::to_string(header.size()) + " cells, found " +
                                 std::to_string(cells.size()));
    }
    const std::string id(cells[0]);
    if (id.empty()) throw CsvError(row_no, "empty patient_id");
    if (id != current) {
      flush();
      for (const auto& f : finished) {
        if (f == id) throw CsvError(row_no, "rows of patient " + id + " are not contiguous");
      }
      current = id;
    }
    Row r;
    r.t = detail::parse_double(cells[1], row_no, "t_hours");
    if (rows.empty() && r.t != 0.0) throw CsvError(row_no, "first collection of " + id + " must be at t=0");
    if (!rows.empty() && !(r.t > rows.back().t)) {
      throw CsvError(row_no, "timestamps of " + id + " not strictly increasing");
    }
    if (cells[2] == "0") {
      r.label = 0;
    } else if (cells[2] == "1") {
      r.label = 1;
    } else {
      throw CsvError(row_no, "label must be 0 or 1, got '" + std::string(cells[2]) + "'");
    }
    r.v.assign(schema.size(), 0.0);
    r.obs.assign(schema.size(), false);
    for (std::size_t c = 3; c < cells.size(); ++c) {
      if (cells[c].empty()) continue;
      const std::size_t j = column_var[c - 3];
      r.v[j] = detail::parse_double(cells[c], row_no, schema.names[j]);
      r.obs[j] = true;
    }
    rows.push_back(std::move(r));
  }
  flush();
  return cohort;
}

inline void save_cohort(const Cohort& cohort, const VariableSchema& schema, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write cohort " + path);
  write_cohort(os, cohort, schema);
}

inline Cohort load_cohort(const std::string& path, const VariableSchema& schema) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read cohort " + path);
  return read_cohort(is, schema);
}

/// Noise-free values of synthetic records in the cohort CSV layout, every cell filled.
inline void write_truth(std::ostream& os, const Cohort& cohort, const VariableSchema& schema) {
  Cohort full;
  full.reserve(cohort.size());
  for (const auto& p : cohort) {
    if (!p.truth) throw std::invalid_argument("write_truth: record " + p.id + " is not synthetic");
    PatientRecord q;
    q.id = p.id;
    q.times = p.times;
    q.labels = p.labels;
    q.values = *p.truth;
    q.observed = Mask::Constant(p.truth->rows(), p.truth->cols(), true);
    full.push_back(std::move(q));
  }
  write_cohort(os, full, schema);
}

/// Attaches a truth table written by write_truth. Ids, times and labels must match row for row.
inline void attach_truth(Cohort& cohort, std::istream& is, const VariableSchema& schema) {
  const Cohort full = read_cohort(is, schema);
  if (full.size() != cohort.size()) throw std::invalid_argument("truth table: patient count differs from cohort");
  for (std::size_t n = 0; n < cohort.size(); ++n) {
    const auto& t = full[n];
    auto& p = cohort[n];
    if (t.id != p.id || t.times != p.times || t.labels != p.labels) {
      throw std::invalid_argument("truth table: record " + t.id + " does not match cohort record " + p.id);
    }
    if (t.observed.count() != t.observed.size()) {
      throw std::invalid_argument("truth table: record " + t.id + " has empty cells");
    }
    p.truth = t.values;
  }
}

inline std::string cohort_to_string(const Cohort& cohort, const VariableSchema& schema) {
  std::ostringstream os;
  write_cohort(os, cohort, schema);
  return os.str();
}

}  // namespace ras::cohort
