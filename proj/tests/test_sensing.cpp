#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ras/cohort/generator.hpp"
#include "ras/predictor/training.hpp"
#include "ras/sensing/episode.hpp"

using namespace ras;
using namespace ras::sensing;
using uncertainty::CorrelationMatrix;

namespace {

struct LinearField {
  Array w;
  Array evaluate(const Array& X, Array* grad) const {
    if (grad) *grad = w.replicate(X.rows(), 1);
    return (X * w.transpose()).eval();
  }
};

double delta_ux(const Array& w, const Array& sigma, const CorrelationMatrix& rho) {
  return uncertainty::delta_from_gradient(w, sigma, rho).U_x;
}

/// Small cohort and cheaply trained models shared by the episode tests.
class EpisodeTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cohort::GeneratorConfig g;
    g.n_patients = 40;
    g.seed = 17;
    cohort_ = new cohort::Cohort(cohort::generate_cohort(g));
    imputer::ImputerConfig ic;
    ic.mean_epochs = 2;
    ic.sigma_epochs = 2;
    imp_ = new imputer::Imputer(imputer::train_imputer(*cohort_, g.schema, ic));
    predictor::PredictorConfig pc;
    pc.seed = 5;
    model_ = new predictor::RiskModel(g.schema.size(), pc, imp_->t_max());
    rho_ = new CorrelationMatrix(uncertainty::estimate_correlations(*cohort_));
  }
  static void TearDownTestSuite() {
    delete cohort_;
    delete imp_;
    delete model_;
    delete rho_;
  }

  static EpisodeModels models() {
    EpisodeModels m{imp_, model_, rho_, {}};
    m.report.mask_samples = 4;
    m.report.dropout_samples = 4;
    return m;
  }

  static cohort::Cohort* cohort_;
  static imputer::Imputer* imp_;
  static predictor::RiskModel* model_;
  static CorrelationMatrix* rho_;
};

cohort::Cohort* EpisodeTest::cohort_ = nullptr;
imputer::Imputer* EpisodeTest::imp_ = nullptr;
predictor::RiskModel* EpisodeTest::model_ = nullptr;
CorrelationMatrix* EpisodeTest::rho_ = nullptr;

std::size_t total_unobserved(const cohort::PatientRecord& p) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < p.size(); ++i) n += p.unobserved_count(i);
  return n;
}

}  // namespace

TEST(PolicyKind, NamesRoundTrip) {
  for (auto k : {PolicyKind::random, PolicyKind::mc_sampling, PolicyKind::ras_n, PolicyKind::ras_l, PolicyKind::ras}) {
    EXPECT_EQ(policy_from_string(to_string(k)), k);
  }
  EXPECT_THROW(policy_from_string("greedy"), std::invalid_argument);
  EXPECT_FALSE(uses_gradient_scores(PolicyKind::random));
  EXPECT_FALSE(uses_gradient_scores(PolicyKind::mc_sampling));
  EXPECT_TRUE(uses_gradient_scores(PolicyKind::ras_l));
}

TEST(SensingPolicy, BudgetMustLieInHalfOpenUnitInterval) {
  SensingPolicy p;
  p.budget = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.budget = 1.01;
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.budget = 1.0;
  EXPECT_NO_THROW(p.validate());
  p.kind = PolicyKind::mc_sampling;
  p.mc_samples = 1;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(SelectVariables, HighestScoresFirst) {
  std::vector<double> scores(13, 0.0);
  scores[3] = 0.5;
  scores[7] = 0.1;
  scores[12] = 0.9;
  EXPECT_EQ(select_variables(scores, {3, 7, 12}, 2), (std::vector<std::size_t>{12, 3}));
}

TEST(SelectVariables, EqualScoresGoToLowerIndex) {
  const std::vector<double> scores(10, 0.25);
  EXPECT_EQ(select_variables(scores, {9, 4, 6, 2}, 3), (std::vector<std::size_t>{2, 4, 6}));
}

TEST(SelectVariables, RejectsMoreThanAvailable) {
  const std::vector<double> scores(5, 1.0);
  EXPECT_THROW(select_variables(scores, {1, 2}, 3), std::invalid_argument);
  EXPECT_THROW(select_variables(scores, {1, 9}, 1), std::out_of_range);
  EXPECT_TRUE(select_variables(scores, {1, 2}, 0).empty());
}

TEST(SelectVariables, MatchesExhaustiveSingleRevealOnDiagonalToy) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> z(0.0, 1.0);
  std::bernoulli_distribution hidden(0.6);
  const Eigen::Index k = 27;
  const CorrelationMatrix rho = CorrelationMatrix::identity(static_cast<std::size_t>(k));
  for (int trial = 0; trial < 50; ++trial) {
    Array w(1, k), sigma = Array::Zero(1, k);
    std::vector<std::size_t> unobserved;
    for (Eigen::Index j = 0; j < k; ++j) {
      w(0, j) = z(rng);
      if (hidden(rng)) {
        sigma(0, j) = 0.1 + std::abs(z(rng));
        unobserved.push_back(static_cast<std::size_t>(j));
      }
    }
    if (unobserved.empty()) continue;
    const double before = delta_ux(w, sigma, rho);
    std::size_t best = unobserved.front();
    double best_drop = -1.0;
    for (std::size_t j : unobserved) {
      Array s = sigma;
      s(0, static_cast<Eigen::Index>(j)) = 0.0;
      const double drop = before - delta_ux(w, s, rho);
      if (drop > best_drop) {
        best_drop = drop;
        best = j;
      }
    }
    const auto scores = uncertainty::per_variable_scores(w, sigma, rho);
    EXPECT_EQ(select_variables(scores, unobserved, 1).front(), best) << "trial " << trial;
  }
}

TEST(AllocateBudget, SpendsTheRoundedAllowanceExactly) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> count(0, 19);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> maskable(1 + trial % 40);
    for (auto& m : maskable) m = count(rng);
    const std::size_t N = std::accumulate(maskable.begin(), maskable.end(), std::size_t{0});
    for (double b : {0.02, 0.04, 0.06, 0.08, 0.5, 1.0}) {
      const auto q = allocate_budget(maskable, b);
      ASSERT_EQ(q.size(), maskable.size());
      std::size_t sum = 0;
      for (std::size_t h = 0; h < q.size(); ++h) {
        EXPECT_LE(q[h], maskable[h]);
        sum += q[h];
      }
      EXPECT_EQ(sum, static_cast<std::size_t>(std::floor(b * static_cast<double>(N) + 0.5)));
    }
  }
}

TEST(AllocateBudget, FullBudgetCoversEveryCell) {
  const std::vector<std::size_t> maskable{19, 0, 7, 12};
  EXPECT_EQ(allocate_budget(maskable, 1.0), maskable);
}

TEST(AllocateBudget, RemaindersGoToEarlierCollectionsOnTies) {
  // 4 reveals over four equal collections of 10: one each.
  EXPECT_EQ(allocate_budget({10, 10, 10, 10}, 0.1), (std::vector<std::size_t>{1, 1, 1, 1}));
  // 2 reveals over four equal collections: the first two.
  EXPECT_EQ(allocate_budget({10, 10, 10, 10}, 0.05), (std::vector<std::size_t>{1, 1, 0, 0}));
  // 1 reveal, shares 0.25 / 0.75.
  EXPECT_EQ(allocate_budget({5, 15}, 0.05), (std::vector<std::size_t>{0, 1}));
}

TEST(AllocateBudget, Rejections) {
  EXPECT_THROW(allocate_budget({3}, 0.0), std::invalid_argument);
  EXPECT_THROW(allocate_budget({3}, 2.0), std::invalid_argument);
  EXPECT_EQ(allocate_budget({0, 0}, 0.5), (std::vector<std::size_t>{0, 0}));
}

TEST_F(EpisodeTest, RevealWritesTheOracleValue) {
  cohort::PatientRecord p = (*cohort_)[0];
  const std::size_t i = 0;
  const auto cand = unobserved_at(p, i);
  ASSERT_FALSE(cand.empty());
  const std::size_t j = cand.front();
  const double v = reveal(p, i, j);
  EXPECT_EQ(v, cohort::true_conditional(p, i, j));
  EXPECT_TRUE(p.observed(0, static_cast<Eigen::Index>(j)));
  EXPECT_EQ(p.values(0, static_cast<Eigen::Index>(j)), v);
  EXPECT_EQ(unobserved_at(p, i).size(), cand.size() - 1);
}

TEST_F(EpisodeTest, DoubleRevealIsRejected) {
  cohort::PatientRecord p = (*cohort_)[1];
  const std::size_t j = unobserved_at(p, 0).front();
  reveal(p, 0, j);
  try {
    reveal(p, 0, j);
    FAIL() << "second reveal accepted";
  } catch (const AlreadyObserved& e) {
    EXPECT_EQ(e.variable, j);
  }
  // Vitals are always observed.
  EXPECT_THROW(reveal(p, 0, 0), AlreadyObserved);
  EXPECT_THROW(reveal(p, p.size(), j), std::out_of_range);
}

TEST_F(EpisodeTest, RevealRejectsNonFiniteOracleAndRealRecordsWithoutOracle) {
  cohort::PatientRecord p = (*cohort_)[2];
  const std::size_t j = unobserved_at(p, 0).front();
  const Oracle bad = [](const cohort::PatientRecord&, std::size_t, std::size_t) {
    return std::numeric_limits<double>::quiet_NaN();
  };
  EXPECT_THROW(reveal(p, 0, j, bad), std::domain_error);
  EXPECT_FALSE(p.observed(0, static_cast<Eigen::Index>(j)));
  p.truth.reset();
  EXPECT_THROW(reveal(p, 0, j), std::logic_error);
  const Oracle fixed = [](const cohort::PatientRecord&, std::size_t, std::size_t) { return 1.5; };
  EXPECT_EQ(reveal(p, 0, j, fixed), 1.5);
}

TEST_F(EpisodeTest, RevealedCellHasZeroSigmaInLaterReports) {
  const std::size_t i = 2;
  const auto it = std::find_if(cohort_->begin(), cohort_->end(), [&](const auto& r) { return r.size() > i; });
  ASSERT_NE(it, cohort_->end());
  cohort::PatientRecord p = *it;
  const auto cand = unobserved_at(p, i);
  ASSERT_FALSE(cand.empty());
  auto istate = imp_->initial_state(1);
  for (std::size_t h = 0; h < i; ++h) istate = detail::impute_hour(*imp_, istate, p, h).step.state;
  const auto before = detail::impute_hour(*imp_, istate, p, i);
  const auto jj = static_cast<Eigen::Index>(cand.front());
  EXPECT_GT(before.sigma(0, jj), 0.0);
  reveal(p, i, cand.front());
  const auto after = detail::impute_hour(*imp_, istate, p, i);
  EXPECT_EQ(after.sigma(0, jj), 0.0);
  const auto r = uncertainty::point_report(*model_, model_->initial_state(1), after.x, after.sigma, p.times[i], *rho_,
                                           models().report, 1);
  EXPECT_EQ(r.report.per_variable[cand.front()], 0.0);
}

TEST_F(EpisodeTest, RevealingEveryVariableZeroesPropagatedUncertainty) {
  cohort::PatientRecord p = (*cohort_)[4];
  const std::size_t i = 1;
  auto istate = imp_->initial_state(1);
  istate = detail::impute_hour(*imp_, istate, p, 0).step.state;
  const auto before = detail::impute_hour(*imp_, istate, p, i);
  const auto rb = uncertainty::point_report(*model_, model_->initial_state(1), before.x, before.sigma, p.times[i],
                                            *rho_, models().report, 1);
  EXPECT_GT(rb.report.U_x, 0.0);
  for (std::size_t j : unobserved_at(p, i)) reveal(p, i, j);
  const auto after = detail::impute_hour(*imp_, istate, p, i);
  const auto ra = uncertainty::point_report(*model_, model_->initial_state(1), after.x, after.sigma, p.times[i], *rho_,
                                            models().report, 1);
  EXPECT_EQ(ra.report.U_x, 0.0);
}

TEST_F(EpisodeTest, BudgetAccountingIsExactForEveryPolicy) {
  for (auto kind : {PolicyKind::random, PolicyKind::mc_sampling, PolicyKind::ras}) {
    for (double b : {0.02, 0.08, 0.3}) {
      SensingPolicy pol;
      pol.kind = kind;
      pol.budget = b;
      pol.mc_samples = 8;
      for (std::size_t n = 0; n < 5; ++n) {
        const auto& p = (*cohort_)[n];
        const auto ep = run_episode(p, pol, models());
        const std::size_t N = total_unobserved(p);
        EXPECT_EQ(ep.allowance, static_cast<std::size_t>(std::floor(b * static_cast<double>(N) + 0.5)));
        EXPECT_EQ(ep.cumulative_reveals, ep.allowance) << to_string(kind) << " budget " << b;
        std::size_t listed = 0;
        for (const auto& h : ep.hours) {
          std::set<std::size_t> seen;
          for (const auto& r : h.revealed) {
            EXPECT_FALSE(p.observed(static_cast<Eigen::Index>(h.index), static_cast<Eigen::Index>(r.variable)));
            EXPECT_TRUE(seen.insert(r.variable).second);
            EXPECT_EQ(r.value, cohort::true_conditional(p, h.index, r.variable));
          }
          listed += h.revealed.size();
        }
        EXPECT_EQ(listed, ep.cumulative_reveals);
      }
    }
  }
}

TEST_F(EpisodeTest, GradientPolicyRevealsTheTopScoredVariables) {
  SensingPolicy pol;
  pol.kind = PolicyKind::ras;
  pol.budget = 0.1;
  const auto& p = (*cohort_)[6];
  const auto ep = run_episode(p, pol, models());
  // Replay the first collection with a reveal and check the pick against the report.
  const auto& h0 = ep.hours.front();
  if (h0.revealed.empty()) GTEST_SKIP() << "no reveal at the first collection";
  auto in = detail::impute_hour(*imp_, imp_->initial_state(1), p, 0);
  const auto m = models();
  const auto pre = uncertainty::point_report(*model_, model_->initial_state(1), in.x, in.sigma, p.times[0], *rho_,
                                             m.report, util::derive_seed(m.report.seed, {util::stable_hash(p.id), 0}));
  const auto want = select_variables(pre.report, unobserved_at(p, 0), h0.revealed.size());
  for (std::size_t r = 0; r < want.size(); ++r) EXPECT_EQ(h0.revealed[r].variable, want[r]);
  EXPECT_DOUBLE_EQ(h0.Ux_pre, pre.report.U_x);
}

TEST_F(EpisodeTest, RandomPolicyIsReproducibleAndSeedSensitive) {
  SensingPolicy pol;
  pol.kind = PolicyKind::random;
  pol.budget = 0.2;
  pol.seed = 9;
  const auto& p = (*cohort_)[7];
  const auto a = run_episode(p, pol, models());
  const auto b = run_episode(p, pol, models());
  pol.seed = 10;
  const auto c = run_episode(p, pol, models());
  bool differs = false;
  ASSERT_EQ(a.hours.size(), b.hours.size());
  for (std::size_t i = 0; i < a.hours.size(); ++i) {
    EXPECT_EQ(a.hours[i].risk_post, b.hours[i].risk_post);
    EXPECT_EQ(a.hours[i].Ux_post, b.hours[i].Ux_post);
    ASSERT_EQ(a.hours[i].revealed.size(), b.hours[i].revealed.size());
    for (std::size_t r = 0; r < a.hours[i].revealed.size(); ++r) {
      EXPECT_EQ(a.hours[i].revealed[r].variable, b.hours[i].revealed[r].variable);
      if (a.hours[i].revealed[r].variable != c.hours[i].revealed[r].variable) differs = true;
    }
  }
  EXPECT_TRUE(differs);
}

TEST_F(EpisodeTest, PoliciesDoNotMutateTheSharedCohort) {
  const cohort::Cohort before = *cohort_;
  for (auto kind : {PolicyKind::random, PolicyKind::ras}) {
    SensingPolicy pol;
    pol.kind = kind;
    pol.budget = 0.5;
    evaluate_policy(*cohort_, pol, models(), 2);
  }
  ASSERT_EQ(before.size(), cohort_->size());
  for (std::size_t n = 0; n < before.size(); ++n) {
    EXPECT_EQ(before[n].observed, (*cohort_)[n].observed);
    EXPECT_EQ(before[n].values, (*cohort_)[n].values);
  }
}

TEST_F(EpisodeTest, WorkerCountDoesNotChangeResults) {
  SensingPolicy pol;
  pol.kind = PolicyKind::ras;
  pol.budget = 0.08;
  const auto one = evaluate_policy(*cohort_, pol, models(), 1);
  const auto three = evaluate_policy(*cohort_, pol, models(), 3);
  EXPECT_EQ(one.auroc, three.auroc);
  EXPECT_EQ(one.mean_ux, three.mean_ux);
  EXPECT_EQ(one.mean_uw, three.mean_uw);
  std::ostringstream a, b;
  write_episode_log(a, one.episodes);
  write_episode_log(b, three.episodes);
  EXPECT_EQ(a.str(), b.str());
}

TEST_F(EpisodeTest, FullBudgetReachesFullObservationAuroc) {
  cohort::Cohort full = *cohort_;
  for (auto& p : full) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      for (std::size_t j : unobserved_at(p, i)) reveal(p, i, j);
    }
  }
  const auto seqs = predictor::prepare_sequences(full, *imp_);
  const double reference = predictor::pooled_auroc(*model_, seqs);

  SensingPolicy pol;
  pol.kind = PolicyKind::random;
  pol.budget = 1.0;
  const auto r = evaluate_policy(*cohort_, pol, models());
  EXPECT_NEAR(r.auroc, reference, 1e-12);
  EXPECT_EQ(r.mean_ux, 0.0);
  for (std::size_t n = 0; n < seqs.size(); ++n) {
    const auto risk = predictor::predict_risk(*model_, seqs[n]);
    for (std::size_t i = 0; i < risk.size(); ++i) EXPECT_NEAR(r.episodes[n].hours[i].risk_post, risk[i], 1e-12);
  }
}

TEST_F(EpisodeTest, ZeroAllowanceLeavesRiskUnchanged) {
  SensingPolicy pol;
  pol.kind = PolicyKind::ras;
  pol.budget = 1e-6;
  const auto ep = run_episode((*cohort_)[8], pol, models());
  EXPECT_EQ(ep.allowance, 0u);
  EXPECT_EQ(ep.decisions, 0u);
  for (const auto& h : ep.hours) {
    EXPECT_EQ(h.risk_pre, h.risk_post);
    EXPECT_EQ(h.Ux_pre, h.Ux_post);
  }
}

TEST_F(EpisodeTest, EpisodeLogIsOneJsonObjectPerHour) {
  SensingPolicy pol;
  pol.kind = PolicyKind::ras;
  pol.budget = 0.3;
  std::vector<SensingEpisode> eps{run_episode((*cohort_)[9], pol, models()), run_episode((*cohort_)[10], pol, models())};
  std::ostringstream os;
  write_episode_log(os, eps);
  std::istringstream is(os.str());
  std::string line;
  std::size_t lines = 0, reveals = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"patient", "hour", "risk_pre", "risk_post", "Ux_pre", "Ux_post", "Uw", "revealed"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    for (const auto& r : j["revealed"]) {
      EXPECT_TRUE(r["name"].is_string());
      EXPECT_TRUE(r["value"].is_number());
      ++reveals;
    }
    ++lines;
  }
  EXPECT_EQ(lines, eps[0].hours.size() + eps[1].hours.size());
  EXPECT_EQ(reveals, eps[0].cumulative_reveals + eps[1].cumulative_reveals);
}

TEST(McSamplingScore, ZeroSigmaScoresZero) {
  const LinearField f{Array::Constant(1, 4, 1.0)};
  Array x = Array::Zero(1, 4), sigma(1, 4);
  sigma << 0.0, 1.0, 0.0, 2.0;
  const auto s = mc_sampling_policy_score(f, x, sigma, 50, 3);
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[2], 0.0);
  EXPECT_GT(s[1], 0.0);
  EXPECT_EQ(mc_sampling_policy_score(f, x, Array::Zero(1, 4), 50, 3), std::vector<double>(4, 0.0));
}

TEST(McSamplingScore, LinearToyRanksLikeTheDeltaMethod) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z(0.0, 1.0);
  const Eigen::Index k = 12;
  const CorrelationMatrix rho = CorrelationMatrix::identity(static_cast<std::size_t>(k));
  Array w(1, k), sigma(1, k), x(1, k);
  // Well-separated w_i^2 sigma_i^2 so sampling noise cannot swap neighbours.
  for (Eigen::Index j = 0; j < k; ++j) {
    w(0, j) = (j % 2 ? -1.0 : 1.0) * std::pow(1.6, static_cast<double>((j * 5) % k));
    sigma(0, j) = 1.0;
    x(0, j) = z(rng);
  }
  const LinearField f{w};
  std::vector<std::size_t> all(static_cast<std::size_t>(k));
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto mc = mc_sampling_policy_score(f, x, sigma, 4000, 1);
  const auto delta = uncertainty::per_variable_scores(w, sigma, rho);
  EXPECT_EQ(select_variables(mc, all, all.size()), select_variables(delta, all, all.size()));
  for (std::size_t j = 0; j < all.size(); ++j) EXPECT_NEAR(mc[j] / delta[j], 1.0, 0.1);
}

TEST(McSamplingScore, SeedDeterministicAndRejectsTinySamples) {
  const LinearField f{Array::Constant(1, 3, 0.7)};
  const Array x = Array::Zero(1, 3), sigma = Array::Constant(1, 3, 0.5);
  EXPECT_EQ(mc_sampling_policy_score(f, x, sigma, 20, 42), mc_sampling_policy_score(f, x, sigma, 20, 42));
  EXPECT_NE(mc_sampling_policy_score(f, x, sigma, 20, 42), mc_sampling_policy_score(f, x, sigma, 20, 43));
  EXPECT_THROW(mc_sampling_policy_score(f, x, sigma, 1, 42), std::invalid_argument);
  EXPECT_THROW(mc_sampling_policy_score(f, x, Array::Constant(1, 3, -1.0), 20, 42), std::invalid_argument);
}
