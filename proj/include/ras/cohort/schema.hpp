#pragma once

#include <cstddef>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ras/util/hash.hpp"

namespace ras::cohort {

struct VariableSchema {
  std::vector<std::string> names;
  std::vector<bool> vital_flags;
  std::vector<double> target_missing_rate;

  [[nodiscard]] std::size_t size() const noexcept { return names.size(); }

  [[nodiscard]] std::size_t index_of(const std::string& name) const {
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (names[j] == name) return j;
    }
    throw std::out_of_range("unknown variable '" + name + "'");
  }

  [[nodiscard]] std::vector<std::size_t> lab_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (!vital_flags[j]) out.push_back(j);
    }
    return out;
  }

  void validate() const {
    if (names.empty()) throw std::invalid_argument("schema: no variables");
    if (vital_flags.size() != names.size() || target_missing_rate.size() != names.size()) {
      throw std::invalid_argument("schema: field lengths differ");
    }
    for (std::size_t j = 0; j < names.size(); ++j) {
      const double r = target_missing_rate[j];
      if (!(r >= 0.0 && r < 1.0)) {
        throw std::invalid_argument("schema: missing rate of " + names[j] + " outside [0,1)");
      }
      if (vital_flags[j] && r != 0.0) {
        throw std::invalid_argument("schema: vital " + names[j] + " must have missing rate 0");
      }
    }
  }
};

/// The 27-variable sepsis schema: 8 vitals then 19 labs. Lab missing rates
/// follow the MIMIC-III column of the published missing-rate table; bands and
/// C-reactive protein are not listed there and default to 0.90.
inline VariableSchema sepsis_schema() {
  VariableSchema s;
  const std::vector<std::string> vitals = {"heart_rate", "resp_rate", "temperature", "spo2",
                                           "sys_bp",     "dias_bp",   "mean_bp",     "glucose"};
  const std::vector<std::pair<std::string, double>> labs = {
      {"bicarbonate", 0.67}, {"wbc", 0.69},        {"bands", 0.90},      {"crp", 0.90},
      {"bun", 0.66},         {"gcs", 0.33},        {"urine_output", 0.33}, {"creatinine", 0.80},
      {"platelet", 0.82},    {"sodium", 0.65},     {"hemoglobin", 0.69}, {"chloride", 0.66},
      {"lactate", 0.89},     {"inr", 0.80},        {"ptt", 0.79},        {"magnesium", 0.69},
      {"anion_gap", 0.67},   {"hematocrit", 0.64}, {"pt", 0.80}};
  for (const auto& v : vitals) {
    s.names.push_back(v);
    s.vital_flags.push_back(true);
    s.target_missing_rate.push_back(0.0);
  }
  for (const auto& [name, rate] : labs) {
    s.names.push_back(name);
    s.vital_flags.push_back(false);
    s.target_missing_rate.push_back(rate);
  }
  return s;
}

inline nlohmann::json to_json(const VariableSchema& s) {
  return nlohmann::json{{"names", s.names},
                        {"vital_flags", s.vital_flags},
                        {"target_missing_rate", s.target_missing_rate}};
}

inline VariableSchema schema_from_json(const nlohmann::json& j) {
  VariableSchema s;
  s.names = j.at("names").get<std::vector<std::string>>();
  s.vital_flags = j.at("vital_flags").get<std::vector<bool>>();
  s.target_missing_rate = j.at("target_missing_rate").get<std::vector<double>>();
  s.validate();
  return s;
}

/// Content hash of the canonical JSON form; artifacts built on a schema record it.
inline std::string schema_hash(const VariableSchema& s) { return util::git_blob_hash(to_json(s).dump()); }

inline void save_schema(const VariableSchema& s, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write schema " + path);
  os << to_json(s).dump(2) << '\n';
}

inline VariableSchema load_schema(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read schema " + path);
  return schema_from_json(nlohmann::json::parse(is));
}

}  // namespace ras::cohort
