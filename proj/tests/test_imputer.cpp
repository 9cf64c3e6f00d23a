#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "ras/cohort/generator.hpp"
#include "ras/cohort/split.hpp"
#include "ras/imputer/imputer.hpp"
#include "support/finite_difference.hpp"

using namespace ras;
using imputer::Imputer;
using imputer::ImputerConfig;
using tensor::Array;
using tensor::Parameter;
using tensor::Var;
namespace fd = ras::testing;

namespace {

struct Trained {
  cohort::CohortSplit split;
  Imputer model;
  imputer::ImputerHistory history;
  std::vector<Array> trunk_before_sigma;
  std::vector<Array> sigma_before;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    cohort::GeneratorConfig g;
    g.n_patients = 1000;
    out.split = cohort::split_cohort(cohort::generate_cohort(g), {0.7, 0.1, 0.2}, 3);
    ImputerConfig cfg;
    out.model = imputer::train_imputer_mean(out.split.train, g.schema, cfg, &out.split.validation, &out.history);
    for (auto* p : out.model.trunk_parameters()) out.trunk_before_sigma.push_back(p->value);
    for (auto* p : out.model.sigma_parameters()) out.sigma_before.push_back(p->value);
    imputer::train_imputer_sigma(out.split.train, out.model, &out.history);
    return out;
  }();
  return t;
}

cohort::PatientRecord toy_record(std::size_t n, std::size_t k, unsigned seed, double observe = 0.6) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution obs(observe);
  cohort::PatientRecord p;
  p.id = "T" + std::to_string(seed);
  p.values = Array::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  p.observed = cohort::Mask::Constant(p.values.rows(), p.values.cols(), false);
  for (std::size_t i = 0; i < n; ++i) {
    p.times.push_back(static_cast<double>(i));
    p.labels.push_back(0);
    for (std::size_t j = 0; j < k; ++j) {
      const auto ii = static_cast<Eigen::Index>(i), jj = static_cast<Eigen::Index>(j);
      if (j < 8 || obs(rng)) {
        p.observed(ii, jj) = true;
        p.values(ii, jj) = 10.0 + 3.0 * z(rng);
      }
    }
  }
  return p;
}

Imputer fresh_model(const cohort::VariableSchema& schema, ImputerConfig cfg = {}) {
  imputer::Standardizer st;
  st.mean.assign(schema.size(), 10.0);
  st.sd.assign(schema.size(), 3.0);
  return Imputer(schema, cfg, 24.0, st);
}

}  // namespace

TEST(TimeEmbedding, ZeroTimeGivesSinZeroCosOne) {
  const Array e = imputer::time_embed(0.0, 8, 50.0);
  ASSERT_EQ(e.cols(), 16);
  for (Eigen::Index j = 0; j < 8; ++j) {
    EXPECT_EQ(e(0, j), 0.0);
    EXPECT_EQ(e(0, 8 + j), 1.0);
  }
}

TEST(TimeEmbedding, IndexZeroIsConstant) {
  for (double t : {0.0, 3.5, 17.0, 71.0}) {
    const Array e = imputer::time_embed(t, 5, 71.0);
    EXPECT_EQ(e(0, 0), 0.0);
    EXPECT_EQ(e(0, 5), 1.0);
  }
}

TEST(TimeEmbedding, MatchesFormulaAtTMax) {
  const double t_max = 37.0;
  const Array e = imputer::time_embed(t_max, 4, t_max);
  EXPECT_NEAR(e(0, 2), std::sin(2.0 / 4.0), 1e-12);
  EXPECT_NEAR(e(0, 4 + 2), std::cos(2.0 / 4.0), 1e-12);
  EXPECT_TRUE((e.array().abs() <= 1.0).all());
}

TEST(TimeEmbedding, RejectsNonPositiveTMax) {
  EXPECT_THROW(imputer::time_embed(1.0, 4, 0.0), std::invalid_argument);
  EXPECT_THROW(imputer::time_embed(1.0, 4, -2.0), std::invalid_argument);
}

TEST(EmbedCollection, ZeroWeightsReturnBias) {
  auto schema = cohort::sepsis_schema();
  Imputer m = fresh_model(schema);
  m.embed.weight.value.setZero();
  tensor::Tape t;
  Array z = Array::Random(1, 27);
  Var e = m.embed_collection(t, t.constant(z), t.constant(imputer::time_embed(3.0, 32, 24.0)));
  EXPECT_EQ(e.value(), m.embed.bias.value);
}

TEST(EmbedCollection, EqualsDenseOnConcatenation) {
  auto schema = cohort::sepsis_schema();
  Imputer m = fresh_model(schema);
  tensor::Tape t;
  Array z = Array::Random(3, 27);
  Array et = imputer::time_embed(5.0, 32, 24.0).replicate(3, 1);
  Var e = m.embed_collection(t, t.constant(z), t.constant(et));
  Array cat(3, 27 + 64);
  cat << z, et;
  Var ref = tensor::dense_forward(t.constant(cat), t.bind(m.embed.weight), t.bind(m.embed.bias));
  EXPECT_EQ(e.value(), ref.value());
}

TEST(EmbedCollection, RejectsWrongWidths) {
  auto schema = cohort::sepsis_schema();
  Imputer m = fresh_model(schema);
  tensor::Tape t;
  EXPECT_THROW(m.embed_collection(t, t.constant(Array::Zero(1, 26)), t.constant(Array::Zero(1, 64))),
               std::invalid_argument);
  EXPECT_THROW(m.embed_collection(t, t.constant(Array::Zero(1, 27)), t.constant(Array::Zero(1, 63))),
               std::invalid_argument);
}

TEST(EmbedCollection, SquaredHeadGradientMatchesFiniteDifferences) {
  auto schema = cohort::sepsis_schema();
  Imputer m = fresh_model(schema);
  Array z = Array::Random(2, 27);
  Array et = imputer::time_embed(9.0, 32, 24.0).replicate(2, 1);
  Array target = Array::Random(2, 32);
  auto loss_of = [&](tensor::Tape& t, const Var& zin) {
    Var e = m.embed_collection(t, zin, t.constant(et));
    return tensor::sum(tensor::square(tensor::sub(e, t.constant(target))));
  };
  tensor::Tape t;
  Var zin = t.input(z);
  t.backward(loss_of(t, zin));
  std::vector<Parameter*> params = {&m.embed.weight, &m.embed.bias};
  tensor::zero_grads(params);
  t.accumulate(params);
  auto numeric = [&] {
    tensor::Tape u(false);
    return loss_of(u, u.constant(z)).scalar();
  };
  fd::GradCheck gc;
  fd::check_entries(z, t.grad(zin), numeric, "z", gc);
  fd::check_entries(m.embed.weight.value, m.embed.weight.grad, numeric, "w_e", gc);
  fd::check_entries(m.embed.bias.value, m.embed.bias.grad, numeric, "b_e", gc);
  EXPECT_LT(gc.max_rel_error, 1e-4) << gc.worst;
}

TEST(ImputationLoss, HandComputedToy) {
  cohort::Mask M(2, 3);
  M << true, false, true, false, true, false;
  Array z = Array::Zero(2, 3);
  Array mu(2, 3);
  mu << 1, 2, 3, 4, 5, 6;
  EXPECT_DOUBLE_EQ(imputer::masked_squared_error(M, mu, z), 35.0);
}

TEST(ImputationLoss, SigmaObjectiveHandComputed) {
  cohort::Mask M(1, 2);
  M << true, false;
  Array mu(1, 2), sg(1, 2), z = Array::Zero(1, 2);
  mu << 2.0, 9.0;
  sg << 1.0, 0.1;
  // 4/2 + 1/2
  EXPECT_DOUBLE_EQ(imputer::masked_sigma_objective(M, mu, sg, z), 2.5);
}

class ImputerGradient : public ::testing::Test {
 protected:
  void check(bool sigma_objective) {
    auto schema = cohort::sepsis_schema();
    Imputer m = fresh_model(schema);
    m.sigma_head.bias.value.setOnes();
    std::mt19937_64 rng(5);
    std::vector<cohort::PatientRecord> recs = {toy_record(3, 27, 1), toy_record(2, 27, 2)};
    std::vector<imputer::StandardizedRecord> std_recs;
    std::vector<imputer::MaskPlan> plans;
    for (const auto& r : recs) {
      std_recs.push_back(imputer::standardize(r, m.standardizer()));
      plans.push_back(imputer::draw_mask_plan(r, schema, 0.5, rng));
    }
    auto b = imputer::make_sequence_batch({&std_recs[0], &std_recs[1]}, {&plans[0].M, &plans[1].M},
                                          m.embed_half_dim(), m.t_max());
    ASSERT_GT(b.weight_total, 0.0);
    auto eval = [&](tensor::Tape& t) { return sigma_objective ? m.sigma_loss(t, b) : m.mean_loss(t, b); };
    tensor::Tape t;
    t.backward(eval(t));
    auto params = m.parameters();
    tensor::zero_grads(params);
    t.accumulate(params);
    auto numeric = [&] {
      tensor::Tape u(false);
      return eval(u).scalar();
    };
    fd::GradCheck gc;
    for (auto* p : params) {
      if (!sigma_objective && p->name.rfind("imputer.sigma", 0) == 0) {
        EXPECT_EQ(p->grad.norm(), 0.0);
        continue;
      }
      fd::check_entries(p->value, p->grad, numeric, p->name, gc);
    }
    EXPECT_GT(gc.checked, 29000u);
    EXPECT_LT(gc.max_rel_error, 1e-4) << gc.worst;
  }
};

TEST_F(ImputerGradient, MeanLossEveryParameter) { check(false); }
TEST_F(ImputerGradient, SigmaLossEveryParameter) { check(true); }

TEST(ImputerTraining, ConstantDatasetIsLearned) {
  auto schema = cohort::sepsis_schema();
  cohort::Cohort c;
  std::mt19937 rng(3);
  std::bernoulli_distribution obs(0.5);
  for (int p = 0; p < 60; ++p) {
    cohort::PatientRecord r = toy_record(8, 27, static_cast<unsigned>(100 + p));
    for (Eigen::Index i = 0; i < r.values.rows(); ++i) {
      for (Eigen::Index j = 0; j < 27; ++j) r.values(i, j) = 5.0 + static_cast<double>(j);
    }
    c.push_back(std::move(r));
  }
  std::vector<cohort::PatientRecord> train(c.begin(), c.begin() + 45), held(c.begin() + 45, c.end());
  ImputerConfig cfg;
  cfg.mean_epochs = 40;
  Imputer m = imputer::train_imputer_mean(train, schema, cfg);
  const auto e = imputer::evaluate_masked(m, held, 0.2, 17);
  ASSERT_GT(e.count, 50u);
  EXPECT_LT(e.rmse * e.rmse, 1e-4);
}

TEST(ImputerTraining, RejectsCohortWithoutLabs) {
  auto schema = cohort::sepsis_schema();
  cohort::PatientRecord r = toy_record(4, 27, 9, 0.0);
  EXPECT_THROW(imputer::train_imputer_mean({r}, schema, ImputerConfig{}), std::invalid_argument);
  EXPECT_THROW(imputer::train_imputer_mean({}, schema, ImputerConfig{}), std::invalid_argument);
}

TEST(ImputerTraining, SigmaPhaseRequiresMeanPhase) {
  auto schema = cohort::sepsis_schema();
  Imputer m = fresh_model(schema);
  EXPECT_THROW(imputer::train_imputer_sigma({toy_record(3, 27, 4)}, m), std::logic_error);
}

TEST(ImputerTraining, SingleDatumSigmaRecoversSquareRootResidual) {
  auto schema = cohort::sepsis_schema();
  cohort::PatientRecord r = toy_record(1, 27, 21, 0.0);
  const auto lab = static_cast<Eigen::Index>(schema.index_of("lactate"));
  r.observed(0, lab) = true;
  r.values(0, lab) = 2.7;
  ImputerConfig cfg;
  cfg.mean_epochs = 0;
  cfg.mask_fraction = 1.0;
  cfg.sigma_plans = 1;
  cfg.sigma_epochs = 1500;
  Imputer m = imputer::train_imputer_mean({r}, schema, cfg);
  imputer::train_imputer_sigma({r}, m);

  const auto sr = imputer::standardize(r, m.standardizer());
  cohort::Mask M = cohort::Mask::Constant(1, 27, false);
  M(0, lab) = true;
  auto b = imputer::make_sequence_batch({&sr}, {&M}, m.embed_half_dim(), m.t_max());
  tensor::Tape t(false);
  auto u = m.unroll(t, b);
  const double resid = u.mu[0].value()(0, lab) - sr.z(0, lab);
  const double sigma = m.deviation_head(t, u.h[0]).value()(0, lab);
  ASSERT_GT(std::abs(resid), 0.1);
  EXPECT_NEAR(sigma, std::sqrt(std::abs(resid)), 0.05 * std::sqrt(std::abs(resid)));
}

TEST(ImputerTraining, HeldOutLossFallsByThirtyPercent) {
  const auto& h = trained().history;
  ASSERT_GE(h.validation_loss.size(), 2u);
  EXPECT_LE(h.validation_loss.back(), 0.7 * h.validation_loss.front());
}

TEST(ImputerTraining, SigmaPhaseFreezesEverythingElse) {
  const auto& t = trained();
  auto& m = const_cast<Imputer&>(t.model);
  auto trunk = m.trunk_parameters();
  ASSERT_EQ(trunk.size(), t.trunk_before_sigma.size());
  for (std::size_t i = 0; i < trunk.size(); ++i) {
    const Array& a = trunk[i]->value;
    const Array& b = t.trunk_before_sigma[i];
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())), 0)
        << trunk[i]->name;
  }
  auto sg = m.sigma_parameters();
  EXPECT_NE(sg[0]->value, t.sigma_before[0]);
  EXPECT_NE(sg[1]->value, t.sigma_before[1]);
}

TEST(ImputerTraining, BeatsMeanBaselineAndCoversTwoSigma) {
  const auto& t = trained();
  const auto e = imputer::evaluate_masked(t.model, t.split.test, 0.2, 99);
  ASSERT_GE(e.count, 1000u);
  EXPECT_LT(e.rmse, e.baseline_rmse);
  EXPECT_GE(e.coverage, 0.80);
}

// sigma^2 = |r| minimizes the per-cell objective, so each lab column's mean
// sigma^2 on held-out masked cells should track its mean |r|.
TEST(ImputerTraining, EveryLabColumnSigmaTracksHeldOutResidual) {
  const auto& t = trained();
  const auto& m = t.model;
  const auto recs = imputer::detail::standardize_all(t.split.test, m.standardizer());
  std::mt19937_64 rng(5);
  const auto plans = imputer::detail::draw_plans(t.split.test, m.schema(), 0.2, rng);
  const auto k = static_cast<Eigen::Index>(m.width());
  Eigen::VectorXd abs_r = Eigen::VectorXd::Zero(k), s2 = Eigen::VectorXd::Zero(k), n = Eigen::VectorXd::Zero(k);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < recs.size(); i += m.config().batch_size) {
    idx.clear();
    for (std::size_t j = i; j < std::min(recs.size(), i + m.config().batch_size); ++j) idx.push_back(j);
    const auto b = imputer::detail::gather(recs, plans, idx, m);
    tensor::Tape tape(false);
    auto u = m.unroll(tape, b);
    for (std::size_t s = 0; s < b.steps(); ++s) {
      const Array sg = m.deviation_head(tape, u.h[s]).value();
      for (Eigen::Index r = 0; r < sg.rows(); ++r) {
        for (Eigen::Index j = 0; j < k; ++j) {
          if (b.weights[s](r, j) == 0.0) continue;
          abs_r(j) += std::abs(u.mu[s].value()(r, j) - b.targets[s](r, j));
          s2(j) += sg(r, j) * sg(r, j);
          n(j) += 1.0;
        }
      }
    }
  }
  for (Eigen::Index j = 8; j < k; ++j) {
    ASSERT_GT(n(j), 20.0) << m.schema().names[static_cast<std::size_t>(j)];
    const double ratio = s2(j) / abs_r(j);
    EXPECT_GT(ratio, 0.5) << m.schema().names[static_cast<std::size_t>(j)];
    EXPECT_LT(ratio, 2.0) << m.schema().names[static_cast<std::size_t>(j)];
  }
}

TEST(Impute, ObservedCellsPassThrough) {
  const auto& t = trained();
  cohort::PatientRecord full = toy_record(5, 27, 31, 1.0);
  const auto d = t.model.impute(full);
  EXPECT_EQ(d.x, full.values);
  const auto& p = t.split.test.front();
  const auto dp = t.model.impute(p);
  for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < 27; ++j) {
      if (p.observed(i, j)) {
        EXPECT_EQ(dp.x(i, j), p.values(i, j));
      } else {
        EXPECT_EQ(dp.x(i, j), dp.mu(i, j));
      }
    }
  }
}

TEST(Impute, TruncationLeavesEarlierOutputsUnchanged) {
  const auto& t = trained();
  const cohort::PatientRecord* p = nullptr;
  for (const auto& r : t.split.test) {
    if (r.size() >= 10) {
      p = &r;
      break;
    }
  }
  ASSERT_NE(p, nullptr);
  const auto full = t.model.impute(*p);
  cohort::PatientRecord cut = *p;
  const std::size_t keep = 6;
  cut.times.resize(keep);
  cut.labels.resize(keep);
  cut.values.conservativeResize(keep, Eigen::NoChange);
  cut.observed.conservativeResize(keep, Eigen::NoChange);
  cut.truth.reset();
  const auto part = t.model.impute(cut);
  EXPECT_EQ(part.z_mu, full.z_mu.topRows(keep));
  EXPECT_EQ(part.z_sigma, full.z_sigma.topRows(keep));

  cohort::PatientRecord changed = *p;
  changed.values.bottomRows(changed.values.rows() - keep).array() += 50.0;
  const auto alt = t.model.impute(changed);
  EXPECT_EQ(alt.z_mu.topRows(keep), full.z_mu.topRows(keep));
}

TEST(Impute, SigmaIsFlooredAndFinite) {
  const auto& t = trained();
  for (std::size_t n = 0; n < 50; ++n) {
    const auto d = t.model.impute(t.split.test[n]);
    EXPECT_TRUE(d.z_sigma.allFinite());
    EXPECT_TRUE(d.z_mu.allFinite());
    EXPECT_GE(d.z_sigma.minCoeff(), t.model.sigma_floor());
    EXPECT_TRUE((d.sigma.array() >= 0.0).all());
    const Array eff = d.effective_z_sigma();
    for (Eigen::Index i = 0; i < eff.size(); ++i) {
      if (d.observed.data()[i]) EXPECT_EQ(eff.data()[i], 0.0);
    }
  }
}

TEST(Impute, StandardizationRoundTrip) {
  const auto& st = trained().model.standardizer();
  for (std::size_t j = 0; j < st.mean.size(); ++j) {
    for (double v : {-3.0, 0.0, 1.25, 140.0}) EXPECT_NEAR(st.inverse(j, st.forward(j, v)), v, 1e-12 * (1 + std::abs(v)));
  }
}

TEST(Impute, StepApiMatchesWholeRecord) {
  const auto& t = trained();
  const auto& p = t.split.test[3];
  const auto d = t.model.impute(p);
  auto s = t.model.initial_state(2);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(p.size()); ++i) {
    Array row = t.model.standardize_row(p.values.row(i), p.observed.row(i)).replicate(2, 1);
    auto o = t.model.step(s, row, p.times[static_cast<std::size_t>(i)]);
    EXPECT_EQ(o.z_mu.row(0), d.z_mu.row(i));
    EXPECT_EQ(o.z_mu.row(1), d.z_mu.row(i));
    EXPECT_EQ(o.z_sigma.row(1), d.z_sigma.row(i));
    s = o.state;
  }
}

TEST(Impute, RejectsEmptyRecordAndFarTimes) {
  const auto& t = trained();
  cohort::PatientRecord empty;
  empty.id = "E";
  empty.values.resize(0, 27);
  empty.observed.resize(0, 27);
  EXPECT_THROW(t.model.impute(empty), std::invalid_argument);
  cohort::PatientRecord far = toy_record(2, 27, 8);
  far.times = {0.0, 10.0 * t.model.t_max()};
  EXPECT_THROW(t.model.impute(far), std::invalid_argument);
}

TEST(ImputerSnapshot, RoundTripReproducesImputations) {
  const auto& t = trained();
  const auto dir = std::filesystem::temp_directory_path() / "ras_imputer_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "imputer.bin").string();
  t.model.save(path);
  Imputer back = Imputer::load(path);
  EXPECT_TRUE(back.mean_trained);
  EXPECT_TRUE(back.sigma_trained);
  EXPECT_EQ(back.t_max(), t.model.t_max());
  const auto a = t.model.impute(t.split.test[0]);
  const auto b = back.impute(t.split.test[0]);
  EXPECT_EQ(a.z_mu, b.z_mu);
  EXPECT_EQ(a.z_sigma, b.z_sigma);

  auto side = nlohmann::json::parse(util::read_file(path + ".json"));
  side["schema_hash"] = "0000";
  std::ofstream(path + ".json") << side.dump();
  EXPECT_THROW(Imputer::load(path), std::runtime_error);
  std::filesystem::remove_all(dir);
}
