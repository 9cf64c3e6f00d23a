// Command-line front end: generate, train-imputer, train-predictor, evaluate, sweep, serve.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "ras/cohort/csv.hpp"
#include "ras/harness/experiments.hpp"
#include "ras/harness/manifest.hpp"
#include "ras/service/http.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace ras;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
};

harness::ExperimentConfig load_config(const Common& c) {
  harness::ExperimentConfig cfg = c.config.empty() ? harness::ExperimentConfig{} : harness::load_experiment(c.config);
  if (c.seed) {
    cfg.cohort.seed = *c.seed;
    cfg.seeds = {*c.seed};
  }
  if (c.workers) {
    if (*c.workers == 0) throw std::invalid_argument("--workers must be positive");
    cfg.workers = *c.workers;
  }
  return cfg;
}

std::string truth_path(const std::string& cohort_csv) {
  fs::path p(cohort_csv);
  return (p.parent_path() / (p.stem().string() + ".truth.csv")).string();
}

std::string schema_path(const std::string& cohort_csv) {
  fs::path p(cohort_csv);
  return (p.parent_path() / (p.stem().string() + ".schema.json")).string();
}

std::string correlation_path(const std::string& imputer_bin) {
  fs::path p(imputer_bin);
  return (p.parent_path() / (p.stem().string() + ".correlation.json")).string();
}

void ensure_parent(const std::string& path) {
  if (const auto d = fs::path(path).parent_path(); !d.empty()) fs::create_directories(d);
}

void add_config_input(harness::RunManifest& m, const Common& c) {
  if (!c.config.empty()) m.add_input(c.config);
}

/// Cohort CSV under the configured schema. A schema sidecar next to the file must agree with it.
cohort::Cohort read_cohort(const std::string& path, const cohort::VariableSchema& schema, harness::RunManifest* m) {
  const auto sp = schema_path(path);
  if (fs::exists(sp)) {
    std::ifstream is(sp);
    const auto found = cohort::schema_from_json(nlohmann::json::parse(is));
    if (cohort::schema_hash(found) != cohort::schema_hash(schema)) {
      throw std::runtime_error("schema hash mismatch: " + sp + " does not describe the configured cohort schema");
    }
    if (m) m->add_input(sp);
  }
  auto c = cohort::load_cohort(path, schema);
  if (m) m->add_input(path);
  return c;
}

/// Cohort from CSV, with the truth table attached when one sits next to it.
cohort::Cohort read_cohort_with_truth(const std::string& path, const cohort::VariableSchema& schema,
                                      harness::RunManifest* m) {
  auto c = read_cohort(path, schema, m);
  const auto tp = truth_path(path);
  if (fs::exists(tp)) {
    std::ifstream is(tp, std::ios::binary);
    cohort::attach_truth(c, is, schema);
    if (m) m->add_input(tp);
  }
  return c;
}

void require_schema(const std::string& what, const std::string& found, const cohort::VariableSchema& expect) {
  const auto want = cohort::schema_hash(expect);
  if (found != want) {
    throw std::runtime_error("schema hash mismatch: " + what + " was built for schema " + found +
                             " but the configured cohort schema is " + want + "; refusing to evaluate");
  }
}

std::string predictor_schema_hash(const std::string& path) {
  std::ifstream is(path + ".json");
  if (!is) throw std::runtime_error("cannot read predictor sidecar " + path + ".json");
  return nlohmann::json::parse(is).at("schema_hash").get<std::string>();
}

/// Imputer, predictor and correlation matrix named on the command line, schema-checked.
harness::ModelBundle load_models(const cohort::VariableSchema& schema, const std::string& imputer_path,
                                 const std::string& predictor_path, std::string correlation, harness::RunManifest& m) {
  harness::ModelBundle b;
  b.imputer = imputer::Imputer::load(imputer_path);
  require_schema("imputer " + imputer_path, cohort::schema_hash(b.imputer.schema()), schema);
  require_schema("predictor " + predictor_path, predictor_schema_hash(predictor_path), schema);
  auto model = predictor::RiskModel::load(predictor_path, &schema);
  b.schema = schema;
  if (correlation.empty()) correlation = correlation_path(imputer_path);
  std::ifstream is(correlation);
  if (!is) throw std::runtime_error("cannot read correlation matrix " + correlation);
  b.rho = uncertainty::correlation_from_json(nlohmann::json::parse(is));
  b.predictors[model.mode] = std::move(model);
  for (const auto& p : {imputer_path, imputer_path + ".json", predictor_path, predictor_path + ".json", correlation}) {
    m.add_input(p);
  }
  return b;
}

int cmd_generate(const Common& c) {
  const auto cfg = load_config(c);
  const std::string out = c.out.empty() ? "cohort.csv" : c.out;
  ensure_parent(out);
  const auto cohort = cohort::generate_cohort(cfg.cohort);
  cohort::save_cohort(cohort, cfg.cohort.schema, out);
  {
    std::ofstream os(truth_path(out), std::ios::binary | std::ios::trunc);
    cohort::write_truth(os, cohort, cfg.cohort.schema);
  }
  {
    std::ofstream os(schema_path(out), std::ios::trunc);
    os << cohort::to_json(cfg.cohort.schema).dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write " + schema_path(out));
  }
  auto m = harness::make_manifest("generate", cfg);
  m.seeds = {cfg.cohort.seed};
  add_config_input(m, c);
  m.add_output(out);
  m.add_output(truth_path(out));
  m.add_output(schema_path(out));
  m.save(out + ".manifest.json");
  std::cout << "wrote " << cohort.size() << " patients to " << out << '\n';
  return 0;
}

int cmd_train_imputer(const Common& c, const std::string& cohort_path) {
  const auto cfg = load_config(c);
  const std::string out = c.out.empty() ? "imputer.bin" : c.out;
  ensure_parent(out);
  auto m = harness::make_manifest("train-imputer", cfg);
  add_config_input(m, c);
  const auto split = harness::split_for(cfg, read_cohort_with_truth(cohort_path, cfg.cohort.schema, &m));
  const std::uint64_t seed = cfg.seeds.front();
  m.seeds = {seed};
  const auto imp = imputer::train_imputer(split.train, cfg.cohort.schema, cfg.imputer_for(seed));
  imp.save(out);
  {
    std::ofstream os(correlation_path(out), std::ios::trunc);
    os << uncertainty::to_json(uncertainty::estimate_correlations(split.train)).dump() << '\n';
  }
  m.add_output(out);
  m.add_output(out + ".json");
  m.add_output(correlation_path(out));
  m.save(out + ".manifest.json");
  std::cout << "wrote imputer " << out << '\n';
  return 0;
}

int cmd_train_predictor(const Common& c, const std::string& cohort_path, const std::string& imputer_path,
                        const std::string& mode_flag) {
  auto cfg = load_config(c);
  if (!mode_flag.empty()) cfg.mode = predictor::training_mode_from_string(mode_flag);
  const std::string out = c.out.empty() ? to_string(cfg.mode) + ".bin" : c.out;
  ensure_parent(out);
  auto m = harness::make_manifest("train-predictor", cfg);
  add_config_input(m, c);
  const auto split = harness::split_for(cfg, read_cohort_with_truth(cohort_path, cfg.cohort.schema, &m));
  const auto imp = imputer::Imputer::load(imputer_path);
  require_schema("imputer " + imputer_path, cohort::schema_hash(imp.schema()), cfg.cohort.schema);
  m.add_input(imputer_path);
  m.add_input(imputer_path + ".json");
  const std::uint64_t seed = cfg.seeds.front();
  m.seeds = {seed};
  const auto seqs = predictor::prepare_sequences(split.train, imp);
  const auto model = predictor::train_predictor(seqs, cfg.predictor_for(seed), cfg.mode, imp.t_max());
  model.save(out, cfg.cohort.schema);
  m.add_output(out);
  m.add_output(out + ".json");
  m.save(out + ".manifest.json");
  std::cout << "wrote " << to_string(cfg.mode) << " predictor " << out << '\n';
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& cohort_path, const std::string& imputer_path,
                 const std::string& predictor_path, const std::string& correlation) {
  const auto cfg = load_config(c);
  const std::string out = c.out.empty() ? "evaluation" : c.out;
  auto m = harness::make_manifest("evaluate", cfg);
  add_config_input(m, c);
  // Models are checked before the cohort is read so a mismatch fails fast.
  const auto bundle = load_models(cfg.cohort.schema, imputer_path, predictor_path, correlation, m);
  const auto mode = bundle.predictors.begin()->first;
  const auto split = harness::split_for(cfg, read_cohort_with_truth(cohort_path, cfg.cohort.schema, &m));
  fs::create_directories(out);

  auto report = cfg.report;
  const auto pts = harness::score_cohort(split.test, bundle.imputer, bundle.model(mode), bundle.rho, report, cfg.workers);
  const auto bins = harness::uncertainty_bins(pts, cfg.bins);
  const auto hours = harness::uncertainty_over_time(pts);
  {
    std::ofstream os(out + "/bins.csv", std::ios::trunc);
    harness::write_bins_csv(os, bins);
  }
  {
    std::ofstream os(out + "/over_time.csv", std::ios::trunc);
    harness::write_over_time_csv(os, hours);
  }
  std::vector<double> scores;
  std::vector<bool> labels;
  double ux = 0.0, uw = 0.0;
  for (const auto& p : pts) {
    scores.push_back(p.risk);
    labels.push_back(p.label);
    ux += p.U_x;
    uw += p.U_w;
  }
  const double n = static_cast<double>(pts.size());
  nlohmann::json summary = {{"mode", to_string(mode)},
                            {"patients", split.test.size()},
                            {"points", pts.size()},
                            {"auroc", harness::auroc(scores, labels)},
                            {"mean_ux", ux / n},
                            {"mean_uw", uw / n},
                            {"bins", cfg.bins},
                            {"spearman", bins.spearman ? nlohmann::json(*bins.spearman) : nlohmann::json(nullptr)}};
  {
    std::ofstream os(out + "/summary.json", std::ios::trunc);
    os << summary.dump(2) << '\n';
  }
  for (const char* f : {"/bins.csv", "/over_time.csv", "/summary.json"}) m.add_output(out + f);
  m.save(out + "/manifest.json");
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_sweep(const Common& c, bool check) {
  const auto cfg = load_config(c);
  const std::string out = c.out.empty() ? cfg.out : c.out;
  auto m = harness::make_manifest("sweep", cfg);
  add_config_input(m, c);
  const auto res = harness::sensing_sweep(cfg, out, &std::cerr);
  m.add_output(out + "/metrics.csv");
  m.save(out + "/manifest.json");
  std::cout << "sweep: " << res.rows.size() << " cells (" << res.computed << " computed, " << res.reused
            << " reused, " << res.failed << " failed) in " << harness::format_metric(res.seconds) << " s\n";
  if (!check) return res.failed ? 1 : 0;
  bool ok = true;
  for (const auto& chk : harness::check_sweep(cfg, res.rows)) {
    std::cout << (chk.passed ? "PASS " : "FAIL ") << chk.name << ": " << chk.detail << '\n';
    ok = ok && chk.passed;
  }
  return ok ? 0 : 1;
}

std::atomic<httplib::Server*> g_server{nullptr};

int cmd_serve(const Common& c, const std::string& cohort_path, const std::string& imputer_path,
              const std::string& predictor_path, const std::string& correlation, std::optional<int> port,
              const std::string& host, const std::string& origin) {
  const auto cfg = load_config(c);
  const std::string state = c.out.empty() ? "service_state" : c.out;
  fs::create_directories(state);
  auto m = harness::make_manifest("serve", cfg);
  auto bundle = load_models(cfg.cohort.schema, imputer_path, predictor_path, correlation, m);
  const auto mode = bundle.predictors.begin()->first;
  auto cohort = read_cohort(cohort_path, cfg.cohort.schema, nullptr);
  service::ServiceOptions opt;
  opt.report = cfg.report;
  opt.workers = cfg.workers;
  opt.observation_log = state + "/observations.jsonl";
  opt.audit_log = state + "/audit.jsonl";
  service::CohortService svc(std::move(bundle), mode, cohort, opt);
  httplib::Server server;
  service::install_routes(server, svc, origin);
  const int p = service::resolve_port(port);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (auto* s = g_server.load()) s->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (auto* s = g_server.load()) s->stop();
  });
  std::cerr << "serving " << cohort.size() << " patients on http://" << host << ':' << p << '\n';
  if (!server.listen(host, p)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(p));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Risk-aware active sensing: cohort generation, training, evaluation, sweeps and the HTTP service"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out, "Output path");
    sub->add_option("--seed", common.seed, "Run seed (overrides the config's cohort seed and seed list)");
    sub->add_option("--workers", common.workers, "Worker threads");
  };
  std::string cohort_path, imputer_path, predictor_path, correlation, mode, host = "0.0.0.0", origin = "*";
  std::optional<int> port;
  bool check = false;

  auto* gen = app.add_subcommand("generate", "Write a synthetic cohort CSV and its truth table");
  add_common(gen);
  auto* ti = app.add_subcommand("train-imputer", "Train the imputer on the training split");
  add_common(ti);
  ti->add_option("--cohort", cohort_path, "Cohort CSV")->required()->check(CLI::ExistingFile);
  auto* tp = app.add_subcommand("train-predictor", "Train a risk predictor on imputed training sequences");
  add_common(tp);
  tp->add_option("--cohort", cohort_path, "Cohort CSV")->required()->check(CLI::ExistingFile);
  tp->add_option("--imputer", imputer_path, "Imputer snapshot")->required()->check(CLI::ExistingFile);
  tp->add_option("--mode", mode, "ras_n, ras_l or ras (default: predictor.mode from the config)");
  auto* ev = app.add_subcommand("evaluate", "Score the test split: AUROC, uncertainty bins, uncertainty over time");
  add_common(ev);
  ev->add_option("--cohort", cohort_path, "Cohort CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--imputer", imputer_path, "Imputer snapshot")->required()->check(CLI::ExistingFile);
  ev->add_option("--predictor", predictor_path, "Predictor snapshot")->required()->check(CLI::ExistingFile);
  ev->add_option("--correlation", correlation, "Correlation matrix JSON (default: next to the imputer)");
  auto* sw = app.add_subcommand("sweep", "Policy x budget x seed sensing sweep (resumable)");
  add_common(sw);
  sw->add_flag("--check", check, "Run the ordering and monotonicity checks afterwards");
  auto* sv = app.add_subcommand("serve", "Serve a cohort over HTTP");
  add_common(sv);
  sv->add_option("--cohort", cohort_path, "Cohort CSV")->required()->check(CLI::ExistingFile);
  sv->add_option("--imputer", imputer_path, "Imputer snapshot")->required()->check(CLI::ExistingFile);
  sv->add_option("--predictor", predictor_path, "Predictor snapshot")->required()->check(CLI::ExistingFile);
  sv->add_option("--correlation", correlation, "Correlation matrix JSON (default: next to the imputer)");
  sv->add_option("--port", port, "Port (default: $RAS_PORT, else 8080)")->check(CLI::Range(0, 65535));
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--origin", origin, "Access-Control-Allow-Origin value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*ti) return cmd_train_imputer(common, cohort_path);
    if (*tp) return cmd_train_predictor(common, cohort_path, imputer_path, mode);
    if (*ev) return cmd_evaluate(common, cohort_path, imputer_path, predictor_path, correlation);
    if (*sw) return cmd_sweep(common, check);
    if (*sv) return cmd_serve(common, cohort_path, imputer_path, predictor_path, correlation, port, host, origin);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
