#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ras/cohort/generator.hpp"
#include "ras/harness/config.hpp"
#include "ras/imputer/imputer.hpp"
#include "ras/predictor/risk_model.hpp"
#include "ras/sensing/policy.hpp"
#include "ras/uncertainty/report.hpp"
#include "ras/util/seed.hpp"

namespace ras::harness {

/// Everything a pipeline run reads. Model seeds are derived from each run seed,
/// so one seed fixes the imputer, all predictor variants and the policy streams.
struct ExperimentConfig {
  cohort::GeneratorConfig cohort;
  std::array<double, 3> split{0.7, 0.1, 0.2};
  std::uint64_t split_seed = 3;
  imputer::ImputerConfig imputer;
  predictor::PredictorConfig predictor;
  predictor::TrainingMode mode = predictor::TrainingMode::ras;
  uncertainty::ReportOptions report;
  std::vector<sensing::PolicyKind> policies{sensing::PolicyKind::random, sensing::PolicyKind::mc_sampling,
                                            sensing::PolicyKind::ras_n, sensing::PolicyKind::ras_l,
                                            sensing::PolicyKind::ras};
  std::vector<double> budgets{0.02, 0.04, 0.06, 0.08};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t mc_samples = 100;
  // Predictor used by the policies that do not read gradient scores.
  predictor::TrainingMode baseline_model = predictor::TrainingMode::ras;
  std::size_t workers = 1;
  std::size_t bins = 6;
  std::string out = "out";
  std::string canonical;  // normalized source text, hashed into manifests

  ExperimentConfig() {
    predictor.adversarial.learning_rate = 1e-3;
  }

  void validate() const {
    cohort.validate();
    imputer.validate();
    predictor.validate();
    report.validate();
    if (seeds.empty()) throw ConfigError("config: at least one seed is required");
    if (budgets.empty()) throw ConfigError("config: at least one budget is required");
    for (std::size_t i = 0; i < budgets.size(); ++i) {
      if (!(budgets[i] > 0.0 && budgets[i] <= 1.0)) throw ConfigError("config: budgets must lie in (0,1]");
      if (i && !(budgets[i] > budgets[i - 1])) throw ConfigError("config: budgets must be sorted ascending");
    }
    if (policies.empty()) throw ConfigError("config: at least one policy is required");
    if (mc_samples < 2) throw ConfigError("config: sweep.mc_samples must be at least 2");
    if (workers == 0) throw ConfigError("config: workers must be positive");
    if (bins == 0) throw ConfigError("config: experiment.bins must be positive");
  }

  [[nodiscard]] std::string hash() const { return util::git_blob_hash(canonical); }

  /// Imputer config for one run seed.
  [[nodiscard]] imputer::ImputerConfig imputer_for(std::uint64_t seed) const {
    auto c = imputer;
    c.seed = util::derive_seed(seed, {util::stable_hash("imputer")});
    return c;
  }

  [[nodiscard]] predictor::PredictorConfig predictor_for(std::uint64_t seed) const {
    auto c = predictor;
    c.seed = util::derive_seed(seed, {util::stable_hash("predictor")});
    return c;
  }

  /// Predictor variant that a policy queries.
  [[nodiscard]] predictor::TrainingMode model_for(sensing::PolicyKind k) const {
    switch (k) {
      case sensing::PolicyKind::ras_n: return predictor::TrainingMode::ras_n;
      case sensing::PolicyKind::ras_l: return predictor::TrainingMode::ras_l;
      case sensing::PolicyKind::ras: return predictor::TrainingMode::ras;
      default: return baseline_model;
    }
  }
};

namespace detail {

inline ExperimentConfig read_experiment(const FlatConfig& f) {
  ExperimentConfig c;
  auto& g = c.cohort;
  g.seed = static_cast<std::uint64_t>(f.get_int("cohort.seed", static_cast<std::int64_t>(g.seed)));
  g.n_patients = f.get_count("cohort.patients", g.n_patients);
  g.sepsis_rate = f.get_double("cohort.sepsis_rate", g.sepsis_rate);
  g.missingness = cohort::missingness_from_string(f.get_string("cohort.missingness", to_string(g.missingness)));
  g.cold_start = f.get_bool("cohort.cold_start", g.cold_start);
  const auto split = f.get_doubles("split.fractions", {c.split[0], c.split[1], c.split[2]});
  if (split.size() != 3) throw ConfigError("config: split.fractions needs three entries");
  c.split = {split[0], split[1], split[2]};
  c.split_seed = static_cast<std::uint64_t>(f.get_int("split.seed", static_cast<std::int64_t>(c.split_seed)));

  auto& im = c.imputer;
  im.hidden = f.get_count("imputer.hidden", im.hidden);
  im.embed_half_dim = f.get_count("imputer.embed_half_dim", im.embed_half_dim);
  im.mask_fraction = f.get_double("imputer.mask_fraction", im.mask_fraction);
  im.mean_epochs = f.get_count("imputer.epochs", im.mean_epochs);
  im.sigma_epochs = f.get_count("imputer.sigma_epochs", im.sigma_epochs);
  im.batch_size = f.get_count("imputer.batch_size", im.batch_size);
  im.learning_rate = f.get_double("imputer.learning_rate", im.learning_rate);
  im.sigma_learning_rate = f.get_double("imputer.sigma_learning_rate", im.sigma_learning_rate);
  im.sigma_floor = f.get_double("imputer.sigma_floor", im.sigma_floor);

  auto& pr = c.predictor;
  pr.hidden = f.get_count("predictor.hidden", pr.hidden);
  pr.embed_half_dim = f.get_count("predictor.embed_half_dim", pr.embed_half_dim);
  pr.dropout = f.get_double("predictor.dropout", pr.dropout);
  pr.epochs = f.get_count("predictor.epochs", pr.epochs);
  pr.batch_size = f.get_count("predictor.batch_size", pr.batch_size);
  pr.adversarial.alpha = f.get_double("predictor.alpha", pr.adversarial.alpha);
  pr.adversarial.s_adv = f.get_double("predictor.s_adv", pr.adversarial.s_adv);
  pr.adversarial.n_adv = f.get_count("predictor.n_adv", pr.adversarial.n_adv);
  pr.adversarial.learning_rate = f.get_double("predictor.learning_rate", pr.adversarial.learning_rate);
  c.mode = predictor::training_mode_from_string(f.get_string("predictor.mode", to_string(c.mode)));

  c.report.mask_samples = f.get_count("uncertainty.mask_samples", c.report.mask_samples);
  c.report.dropout_samples = f.get_count("uncertainty.dropout_samples", c.report.dropout_samples);
  c.report.seed = static_cast<std::uint64_t>(f.get_int("uncertainty.seed", static_cast<std::int64_t>(c.report.seed)));

  std::vector<std::string> pol;
  for (auto k : c.policies) pol.push_back(to_string(k));
  c.policies.clear();
  for (const auto& s : f.get_strings("sweep.policies", pol)) c.policies.push_back(sensing::policy_from_string(s));
  c.budgets = f.get_doubles("sweep.budgets", c.budgets);
  std::vector<std::int64_t> seeds(c.seeds.begin(), c.seeds.end());
  seeds = f.get_ints("sweep.seeds", seeds);
  c.seeds.clear();
  for (auto s : seeds) {
    if (s < 0) throw ConfigError("config: seeds must be non-negative");
    c.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  c.mc_samples = f.get_count("sweep.mc_samples", c.mc_samples);
  c.baseline_model = predictor::training_mode_from_string(f.get_string("sweep.baseline_model", to_string(c.baseline_model)));
  c.workers = f.get_count("run.workers", c.workers);
  c.bins = f.get_count("experiment.bins", c.bins);
  c.out = f.get_string("run.out", c.out);
  f.reject_unused();
  c.canonical = f.canonical();
  c.validate();
  return c;
}

}  // namespace detail

/// Every failure, including bad enum names and out-of-range values, surfaces as ConfigError.
inline ExperimentConfig experiment_from_flat(const FlatConfig& f) {
  try {
    return detail::read_experiment(f);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline ExperimentConfig load_experiment(const std::string& path) { return experiment_from_flat(FlatConfig::load(path)); }

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json pol = nlohmann::json::array();
  for (auto k : c.policies) pol.push_back(to_string(k));
  return {{"cohort", {{"seed", c.cohort.seed},
                      {"patients", c.cohort.n_patients},
                      {"sepsis_rate", c.cohort.sepsis_rate},
                      {"missingness", to_string(c.cohort.missingness)},
                      {"cold_start", c.cohort.cold_start}}},
          {"split", {{"fractions", c.split}, {"seed", c.split_seed}}},
          {"imputer", imputer::to_json(c.imputer)},
          {"predictor", predictor::to_json(c.predictor)},
          {"mode", to_string(c.mode)},
          {"uncertainty", {{"mask_samples", c.report.mask_samples},
                           {"dropout_samples", c.report.dropout_samples},
                           {"seed", c.report.seed}}},
          {"sweep", {{"policies", pol},
                     {"budgets", c.budgets},
                     {"seeds", c.seeds},
                     {"mc_samples", c.mc_samples},
                     {"baseline_model", to_string(c.baseline_model)}}},
          {"bins", c.bins}};
}

}  // namespace ras::harness
