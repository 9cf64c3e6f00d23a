#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ras/cohort/generator.hpp"
#include "ras/uncertainty/report.hpp"

using namespace ras;
using namespace ras::uncertainty;
using predictor::RiskModel;

namespace {

struct LinearField {
  Array w;
  double b = 0.0;
  Array evaluate(const Array& X, Array* grad) const {
    if (grad) *grad = w.replicate(X.rows(), 1);
    return ((X * w.transpose()).array() + b).matrix();
  }
};

struct SineField {
  Array evaluate(const Array& X, Array* grad) const {
    if (grad) *grad = X.array().cos().matrix();
    return X.array().sin().rowwise().sum().matrix();
  }
};

CorrelationMatrix random_correlation(Eigen::Index k, std::mt19937_64& rng, double strength) {
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::MatrixXd A(k, 3);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = z(rng) * strength;
  Eigen::MatrixXd C = A * A.transpose();
  C.diagonal().array() += 1.0;
  Eigen::VectorXd d = C.diagonal().cwiseSqrt().cwiseInverse();
  CorrelationMatrix r{d.asDiagonal() * C * d.asDiagonal(), Eigen::MatrixXi::Zero(k, k)};
  r.rho.diagonal().setOnes();
  return r;
}

/// Direct sample-covariance oracle for the brute-force comparison.
double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

RiskModel test_model(double dropout = 0.2) {
  predictor::PredictorConfig pc;
  pc.dropout = dropout;
  pc.seed = 8;
  return RiskModel(27, pc, 48.0);
}

predictor::Sequence random_sequence(std::size_t n, unsigned seed, double hidden_rate = 0.5) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution hide(hidden_rate);
  predictor::Sequence s;
  s.id = "U" + std::to_string(seed);
  s.x.resize(static_cast<Eigen::Index>(n), 27);
  s.sigma = Array::Zero(s.x.rows(), 27);
  for (std::size_t i = 0; i < n; ++i) {
    s.times.push_back(static_cast<double>(i));
    s.labels.push_back(0);
    for (Eigen::Index j = 0; j < 27; ++j) {
      const auto ii = static_cast<Eigen::Index>(i);
      s.x(ii, j) = z(rng);
      if (j >= 8 && hide(rng)) s.sigma(ii, j) = 0.2 + 0.8 * std::abs(z(rng));
    }
  }
  return s;
}

}  // namespace

TEST(Correlation, DuplicatedColumnIsPerfectlyCorrelated) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0.0, 1.0);
  Array v(200, 3);
  cohort::Mask m = cohort::Mask::Constant(200, 3, true);
  for (Eigen::Index r = 0; r < 200; ++r) {
    v(r, 0) = z(rng);
    v(r, 1) = v(r, 0);
    v(r, 2) = z(rng);
  }
  const auto c = correlation_from_rows(v, m);
  EXPECT_NEAR(c.rho(0, 1), 1.0, 1e-12);
  EXPECT_EQ(c.support(0, 1), 200);
}

TEST(Correlation, IndependentNoiseIsNearZero) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> z(0.0, 1.0);
  Array v(10000, 4);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = z(rng);
  const auto c = correlation_from_rows(v, cohort::Mask::Constant(10000, 4, true));
  for (Eigen::Index i = 0; i < 4; ++i) {
    for (Eigen::Index j = 0; j < 4; ++j) {
      if (i != j) EXPECT_LT(std::abs(c.rho(i, j)), 0.05);
    }
  }
}

TEST(Correlation, MatchesBruteForceOnHandData) {
  Array v(5, 3);
  v << 1.0, 2.0, 9.0,
       2.0, 4.5, 7.0,
       3.0, 5.5, 8.5,
       4.0, 9.0, 1.0,
       5.5, 9.5, 2.0;
  const auto c = correlation_from_rows(v, cohort::Mask::Constant(5, 3, true), 2);
  std::vector<std::vector<double>> cols(3);
  for (Eigen::Index r = 0; r < 5; ++r) {
    for (Eigen::Index j = 0; j < 3; ++j) cols[static_cast<std::size_t>(j)].push_back(v(r, j));
  }
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const double want = i == j ? 1.0 : pearson(cols[i], cols[j]);
      EXPECT_NEAR(c.rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), want, 1e-12);
    }
  }
}

TEST(Correlation, UsesOnlyCoObservedRowsAndShrinksThinPairs) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> z(0.0, 1.0);
  Array v(100, 4);
  cohort::Mask m = cohort::Mask::Constant(100, 4, true);
  for (Eigen::Index r = 0; r < 100; ++r) {
    v(r, 0) = z(rng);
    v(r, 1) = v(r, 0) + 0.1 * z(rng);
    v(r, 2) = z(rng);
    v(r, 3) = 0.0;
    m(r, 3) = false;
    if (r >= 20) m(r, 2) = false;  // only 20 rows co-observed with the others
    if (r % 2 == 0) v(r, 1) = 0.0, m(r, 1) = false;
  }
  const auto c = correlation_from_rows(v, m);
  EXPECT_EQ(c.support(0, 1), 50);
  EXPECT_GT(c.rho(0, 1), 0.9);
  EXPECT_EQ(c.support(0, 2), 20);
  EXPECT_EQ(c.rho(0, 2), 0.0);
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_EQ(c.rho(3, j), j == 3 ? 1.0 : 0.0);
}

TEST(Correlation, RepairRestoresPositiveSemidefinite) {
  Eigen::MatrixXd r(3, 3);
  r << 1.0, 0.9, -0.9,
       0.9, 1.0, 0.9,
       -0.9, 0.9, 1.0;
  const Eigen::MatrixXd fixed = repair_psd(r);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fixed);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_EQ(fixed(i, i), 1.0);
  EXPECT_LT((fixed - fixed.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_TRUE((fixed.array().abs() <= 1.0 + 1e-12).all());
}

TEST(Correlation, SyntheticCohortInvariants) {
  cohort::GeneratorConfig g;
  g.n_patients = 200;
  const auto c = estimate_correlations(cohort::generate_cohort(g));
  ASSERT_EQ(c.size(), 27u);
  EXPECT_LT((c.rho - c.rho.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  for (Eigen::Index i = 0; i < 27; ++i) EXPECT_EQ(c.rho(i, i), 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c.rho);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
  EXPECT_FALSE(c.is_diagonal());
  EXPECT_THROW(estimate_correlations({}), std::invalid_argument);
  const auto back = correlation_from_json(to_json(c));
  EXPECT_EQ(back.rho, c.rho);
  EXPECT_EQ(back.support, c.support);
}

TEST(PropagateLinear, HandCases) {
  Array w(1, 1), s(1, 1);
  w << 1.0;
  s << 0.5;
  EXPECT_DOUBLE_EQ(propagate_linear(w, s, CorrelationMatrix::identity(1)), 0.25);
  CorrelationMatrix r = CorrelationMatrix::identity(2);
  r.rho(0, 1) = r.rho(1, 0) = -1.0;
  Array w2(1, 2), s2(1, 2);
  w2 << 1.0, 1.0;
  s2 << 1.0, 1.0;
  EXPECT_EQ(propagate_linear(w2, s2, r), 0.0);
  s2 << 1.0, -0.1;
  EXPECT_THROW(propagate_linear(w2, s2, r), std::invalid_argument);
}

TEST(PropagateLinear, MatchesPseudoRandomSampling) {
  std::mt19937_64 rng(4);
  const auto rho = random_correlation(6, rng, 0.8);
  LinearField f{Array::Random(1, 6), 0.3};
  Array sigma = (Array::Random(1, 6).array().abs() + 0.1).matrix();
  MonteCarloOptions opt;
  opt.samples = 1000000;
  opt.sampler = Sampler::pseudo_random;
  opt.chunk = 4096;
  const double mc = propagated_uncertainty_mc(f, Array::Zero(1, 6), sigma, rho, opt);
  const double exact = propagate_linear(f.w, sigma, rho);
  EXPECT_NEAR(mc / exact, 1.0, 0.01);
}

TEST(PropagatedDelta, FullyObservedGivesZero) {
  std::mt19937_64 rng(5);
  const auto rho = random_correlation(5, rng, 0.5);
  const auto e = propagated_uncertainty_delta(SineField{}, Array::Random(1, 5), Array::Zero(1, 5), rho);
  EXPECT_EQ(e.U_x, 0.0);
  for (double v : e.per_variable) EXPECT_EQ(v, 0.0);
}

TEST(PropagatedDelta, ScoresSumToTotal) {
  std::mt19937_64 rng(6);
  const Array x = Array::Random(1, 7), s = Array::Random(1, 7).cwiseAbs();
  const auto diag = propagated_uncertainty_delta(SineField{}, x, s, CorrelationMatrix::identity(7));
  double sum = 0.0;
  for (double v : diag.per_variable) sum += v;
  EXPECT_DOUBLE_EQ(diag.U_x, sum);
  const Array g = x.array().cos().matrix();
  for (Eigen::Index i = 0; i < 7; ++i) {
    EXPECT_DOUBLE_EQ(diag.per_variable[static_cast<std::size_t>(i)], g(0, i) * g(0, i) * s(0, i) * s(0, i));
  }
  const auto corr = propagated_uncertainty_delta(SineField{}, x, s, random_correlation(7, rng, 0.9));
  sum = 0.0;
  for (double v : corr.per_variable) sum += v;
  EXPECT_NEAR(corr.U_x_raw, sum, 1e-14);
}

TEST(PropagatedDelta, ExactForLinearModel) {
  std::mt19937_64 rng(7);
  const auto rho = random_correlation(27, rng, 0.7);
  LinearField f{Array::Random(1, 27), -0.2};
  const Array s = Array::Random(1, 27).cwiseAbs();
  const auto e = propagated_uncertainty_delta(f, Array::Random(1, 27), s, rho);
  EXPECT_EQ(e.U_x_raw, propagate_linear(f.w, s, rho));
}

TEST(PropagatedDelta, NonFiniteGradientRejected) {
  LinearField f{Array::Constant(1, 3, std::nan(""))};
  EXPECT_THROW(propagated_uncertainty_delta(f, Array::Zero(1, 3), Array::Ones(1, 3), CorrelationMatrix::identity(3)),
               std::domain_error);
}

TEST(PropagatedDelta, RevealNeverIncreasesUnderDiagonalCorrelation) {
  const Array x = Array::Random(1, 9);
  Array s = Array::Random(1, 9).cwiseAbs();
  const auto rho = CorrelationMatrix::identity(9);
  double prev = propagated_uncertainty_delta(SineField{}, x, s, rho).U_x;
  for (Eigen::Index j = 0; j < 9; ++j) {
    s(0, j) = 0.0;
    const double now = propagated_uncertainty_delta(SineField{}, x, s, rho).U_x;
    EXPECT_LE(now, prev);
    prev = now;
  }
  EXPECT_EQ(prev, 0.0);
}

TEST(MonteCarloPropagation, ZeroSigmaAndRejections) {
  const auto rho = CorrelationMatrix::identity(4);
  EXPECT_EQ(propagated_uncertainty_mc(SineField{}, Array::Zero(1, 4), Array::Zero(1, 4), rho), 0.0);
  MonteCarloOptions one;
  one.samples = 1;
  EXPECT_THROW(propagated_uncertainty_mc(SineField{}, Array::Zero(1, 4), Array::Ones(1, 4), rho, one),
               std::invalid_argument);
  CorrelationMatrix bad = CorrelationMatrix::identity(3);
  bad.rho << 1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0;
  EXPECT_THROW(propagated_uncertainty_mc(SineField{}, Array::Zero(1, 3), Array::Ones(1, 3), bad), std::runtime_error);
}

TEST(MonteCarloPropagation, LinearModelWithinTwoPercent) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 3; ++rep) {
    const auto rho = random_correlation(27, rng, 0.6);
    LinearField f{Array::Random(1, 27), 0.0};
    Array s = Array::Random(1, 27).cwiseAbs();
    for (Eigen::Index j = 0; j < 8; ++j) s(0, j) = 0.0;
    MonteCarloOptions opt;
    opt.samples = 100000;
    opt.seed = static_cast<std::uint64_t>(rep);
    for (Sampler smp : {Sampler::sobol, Sampler::pseudo_random}) {
      opt.sampler = smp;
      const double mc = propagated_uncertainty_mc(f, Array::Random(1, 27), s, rho, opt);
      EXPECT_NEAR(mc / propagate_linear(f.w, s, rho), 1.0, 0.02);
    }
  }
}

TEST(MonteCarloPropagation, SeedDeterministic) {
  const auto rho = CorrelationMatrix::identity(5);
  const Array s = Array::Constant(1, 5, 0.4);
  for (Sampler smp : {Sampler::sobol, Sampler::pseudo_random}) {
    MonteCarloOptions opt;
    opt.samples = 3000;
    opt.sampler = smp;
    const double a = propagated_uncertainty_mc(SineField{}, Array::Zero(1, 5), s, rho, opt);
    const double b = propagated_uncertainty_mc(SineField{}, Array::Zero(1, 5), s, rho, opt);
    EXPECT_EQ(a, b);
    opt.seed = 2;
    EXPECT_NE(a, propagated_uncertainty_mc(SineField{}, Array::Zero(1, 5), s, rho, opt));
  }
}

TEST(MonteCarloPropagation, DeltaWithinResidualBoundOnRiskModel) {
  const RiskModel m = test_model();
  const auto rho = CorrelationMatrix::identity(27);
  for (unsigned n = 0; n < 4; ++n) {
    const auto s = random_sequence(5, 40 + n);
    predictor::RiskPoint rp{&m, m.prefix_state(s.x, s.times, 4), s.times[4], Array()};
    const Array x = s.x.bottomRows(1), sg = s.sigma.bottomRows(1);
    const auto delta = propagated_uncertainty_delta(rp, x, sg, rho);
    MonteCarloOptions opt;
    opt.samples = 10000;
    const double mc = propagated_uncertainty_mc(rp, x, sg, rho, opt);
    const double gamma = predictor::local_linearity(rp, x, sg);
    const double bound = std::max(0.1 * mc, 2.0 * std::sqrt(delta.U_x) * gamma + gamma * gamma);
    EXPECT_LE(std::abs(delta.U_x - mc), bound) << "delta " << delta.U_x << " mc " << mc << " gamma " << gamma;
  }
}

TEST(Epistemic, ZeroDropoutGivesZero) {
  const RiskModel m = test_model(0.0);
  const auto s = random_sequence(6, 50);
  EXPECT_EQ(epistemic_uncertainty(m, s, 5, 30, 1), 0.0);
}

TEST(Epistemic, ReproducibleAndRejectsTooFewSamples) {
  const RiskModel m = test_model();
  const auto s = random_sequence(6, 51);
  const double a = epistemic_uncertainty(m, s, 3, 30, 9);
  EXPECT_EQ(a, epistemic_uncertainty(m, s, 3, 30, 9));
  EXPECT_GT(a, 0.0);
  EXPECT_THROW(epistemic_uncertainty(m, s, 3, 1, 9), std::invalid_argument);
  EXPECT_THROW(epistemic_uncertainty(m, s, 6, 30, 9), std::out_of_range);
}

TEST(Epistemic, Stabilizes) {
  const RiskModel m = test_model();
  const auto s = random_sequence(6, 52);
  const double small = epistemic_uncertainty(m, s, 5, 500, 3);
  const double large = epistemic_uncertainty(m, s, 5, 2000, 4);
  EXPECT_LT(std::abs(small - large), 0.1 * large);
}

TEST(FullReport, FullyObservedHasOnlyEpistemicPart) {
  const RiskModel m = test_model();
  auto s = random_sequence(4, 60);
  s.sigma.setZero();
  const auto reports = trajectory_reports(m, s, CorrelationMatrix::identity(27));
  ASSERT_EQ(reports.size(), 4u);
  for (const auto& r : reports) {
    EXPECT_EQ(r.U_x, 0.0);
    EXPECT_EQ(r.U, r.U_w);
    EXPECT_GT(r.U_w, 0.0);
  }
}

TEST(FullReport, TotalsAddUpAndObservedScoresAreZero) {
  const RiskModel m = test_model();
  const auto s = random_sequence(6, 61);
  std::mt19937_64 rng(3);
  const auto rho = random_correlation(27, rng, 0.5);
  const auto reports = trajectory_reports(m, s, rho);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    EXPECT_EQ(r.U, r.U_x + r.U_w);
    EXPECT_GE(r.U_x, 0.0);
    EXPECT_EQ(r.samples_used, 40u);
    for (Eigen::Index j = 0; j < 27; ++j) {
      if (s.sigma(static_cast<Eigen::Index>(i), j) == 0.0) EXPECT_EQ(r.per_variable[static_cast<std::size_t>(j)], 0.0);
    }
    EXPECT_DOUBLE_EQ(r.risk, predictor::predict_risk(m, s)[i]);
  }
}

TEST(FullReport, SingleMaskReducesToOneDeltaEstimate) {
  const RiskModel m = test_model();
  const auto s = random_sequence(3, 62);
  const auto rho = CorrelationMatrix::identity(27);
  ReportOptions opt;
  opt.mask_samples = 1;
  const auto prev = m.prefix_state(s.x, s.times, 2);
  const std::uint64_t seed = 17;
  const auto pr = point_report(m, prev, s.x.bottomRows(1), s.sigma.bottomRows(1), s.times[2], rho, opt, seed);
  std::mt19937_64 mrng(util::derive_seed(seed, {1}));
  predictor::RiskPoint rp{&m, prev, s.times[2], m.head_masks(1, mrng)};
  const auto e = propagated_uncertainty_delta(rp, s.x.bottomRows(1), s.sigma.bottomRows(1), rho);
  EXPECT_DOUBLE_EQ(pr.report.U_x, e.U_x);
  for (std::size_t j = 0; j < 27; ++j) EXPECT_DOUBLE_EQ(pr.report.per_variable[j], e.per_variable[j]);
  opt.mask_samples = 0;
  EXPECT_THROW(point_report(m, prev, s.x.bottomRows(1), s.sigma.bottomRows(1), 2.0, rho, opt, seed),
               std::invalid_argument);
}

TEST(FullReport, FromRawRecordAndJsonShape) {
  cohort::GeneratorConfig g;
  g.n_patients = 30;
  const auto c = cohort::generate_cohort(g);
  imputer::ImputerConfig ic;
  ic.mean_epochs = 1;
  ic.sigma_epochs = 1;
  const auto imp = imputer::train_imputer(c, g.schema, ic);
  const RiskModel m(27, predictor::PredictorConfig{}, imp.t_max());
  const auto rho = estimate_correlations(c);
  const auto r = full_report(c[0], m, imp, rho, 0);
  EXPECT_GT(r.U_x, 0.0);
  const auto j = to_json(r, g.schema.names);
  for (const char* key : {"U", "U_x", "U_w", "per_variable", "samples_used"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["per_variable"].size(), 27u);
  EXPECT_EQ(j["per_variable"]["heart_rate"].get<double>(), 0.0);
  EXPECT_THROW(full_report(c[0], m, imp, rho, c[0].size()), std::out_of_range);
}
