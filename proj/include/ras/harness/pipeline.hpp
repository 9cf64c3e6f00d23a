#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "ras/cohort/split.hpp"
#include "ras/harness/experiment.hpp"
#include "ras/predictor/training.hpp"
#include "ras/sensing/episode.hpp"
#include "ras/uncertainty/correlation.hpp"

namespace ras::harness {

namespace fs = std::filesystem;

/// Frozen models for one run seed: the imputer, the predictor variants and the
/// correlation matrix estimated from the training split.
struct ModelBundle {
  cohort::VariableSchema schema;
  imputer::Imputer imputer;
  std::map<predictor::TrainingMode, predictor::RiskModel> predictors;
  uncertainty::CorrelationMatrix rho;

  [[nodiscard]] const predictor::RiskModel& model(predictor::TrainingMode m) const {
    const auto it = predictors.find(m);
    if (it == predictors.end()) throw std::out_of_range("bundle has no " + to_string(m) + " predictor");
    return it->second;
  }

  [[nodiscard]] sensing::EpisodeModels episode_models(predictor::TrainingMode m,
                                                      const uncertainty::ReportOptions& report) const {
    return {&imputer, &model(m), &rho, report};
  }
};

inline cohort::CohortSplit split_for(const ExperimentConfig& c, const cohort::Cohort& all) {
  return cohort::split_cohort(all, c.split, c.split_seed);
}

/// Hash of every config field that changes trained weights for `seed`.
inline std::string model_key(const ExperimentConfig& c, std::uint64_t seed) {
  const auto j = to_json(c);
  const nlohmann::json k = {{"cohort", j["cohort"]}, {"split", j["split"]},   {"imputer", j["imputer"]},
                            {"predictor", j["predictor"]}, {"seed", seed}};
  return util::git_blob_hash(k.dump());
}

inline std::set<predictor::TrainingMode> modes_needed(const ExperimentConfig& c) {
  std::set<predictor::TrainingMode> out;
  for (auto k : c.policies) out.insert(c.model_for(k));
  return out;
}

inline ModelBundle train_bundle(const ExperimentConfig& c, const cohort::CohortSplit& split, std::uint64_t seed,
                                const std::set<predictor::TrainingMode>& modes) {
  ModelBundle b;
  b.schema = c.cohort.schema;
  b.imputer = imputer::train_imputer(split.train, b.schema, c.imputer_for(seed));
  b.rho = uncertainty::estimate_correlations(split.train);
  const auto seqs = predictor::prepare_sequences(split.train, b.imputer);
  for (auto m : modes) b.predictors[m] = predictor::train_predictor(seqs, c.predictor_for(seed), m, b.imputer.t_max());
  return b;
}

inline void save_bundle(const ModelBundle& b, const std::string& dir, const std::string& key) {
  fs::create_directories(dir);
  b.imputer.save(dir + "/imputer.bin");
  nlohmann::json modes = nlohmann::json::array();
  for (const auto& [m, model] : b.predictors) {
    model.save(dir + "/" + to_string(m) + ".bin", b.schema);
    modes.push_back(to_string(m));
  }
  std::ofstream rho(dir + "/correlation.json", std::ios::trunc);
  rho << uncertainty::to_json(b.rho).dump() << '\n';
  // Written last: its presence marks a complete bundle.
  std::ofstream meta(dir + "/bundle.json", std::ios::trunc);
  meta << nlohmann::json{{"key", key}, {"modes", modes}}.dump(2) << '\n';
  if (!meta) throw std::runtime_error("cannot write " + dir + "/bundle.json");
}

inline ModelBundle load_bundle(const std::string& dir) {
  std::ifstream meta(dir + "/bundle.json");
  if (!meta) throw std::runtime_error("no model bundle in " + dir);
  const auto j = nlohmann::json::parse(meta);
  ModelBundle b;
  b.imputer = imputer::Imputer::load(dir + "/imputer.bin");
  b.schema = b.imputer.schema();
  for (const auto& m : j.at("modes")) {
    const auto mode = predictor::training_mode_from_string(m.get<std::string>());
    b.predictors[mode] = predictor::RiskModel::load(dir + "/" + m.get<std::string>() + ".bin", &b.schema);
  }
  std::ifstream rho(dir + "/correlation.json");
  if (!rho) throw std::runtime_error("no correlation matrix in " + dir);
  b.rho = uncertainty::correlation_from_json(nlohmann::json::parse(rho));
  return b;
}

/// Loads the cached bundle for `seed` if its key matches and it holds every
/// needed variant; otherwise trains and caches it.
inline ModelBundle bundle_for_seed(const ExperimentConfig& c, const cohort::CohortSplit& split, std::uint64_t seed,
                                   const std::string& cache_dir) {
  const std::string dir = cache_dir + "/seed_" + std::to_string(seed);
  const std::string key = model_key(c, seed);
  const auto modes = modes_needed(c);
  std::ifstream meta(dir + "/bundle.json");
  if (meta) {
    try {
      const auto j = nlohmann::json::parse(meta);
      std::set<std::string> have;
      for (const auto& m : j.at("modes")) have.insert(m.get<std::string>());
      bool complete = j.at("key").get<std::string>() == key;
      for (auto m : modes) complete = complete && have.count(to_string(m));
      if (complete) return load_bundle(dir);
    } catch (const std::exception&) {
      // Unreadable cache: retrain below.
    }
  }
  ModelBundle b = train_bundle(c, split, seed, modes);
  save_bundle(b, dir, key);
  return b;
}

}  // namespace ras::harness
