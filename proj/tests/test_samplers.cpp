#include <gtest/gtest.h>

#include <cmath>

#include "cutpost/cutpost.hpp"
#include "support/stats.hpp"
#include "support/toy_models.hpp"

using namespace cutpost;
using cutpost::testing::ks_two_sample_pvalue;
using cutpost::testing::NormalToy;

namespace {

double std_normal_log(const Vector& x) { return -0.5 * x.squaredNorm(); }

// Exact cut marginal of eta in the toy: eta = c phi + const + N(0, cond_var).
std::pair<double, double> toy_cut_eta_moments(const NormalToy& t) {
  const double P = t.loss_precision(), q = 1.0 / (t.tau * t.tau);
  const double slope = (q * t.b - P * t.a) / (P + q);
  return {t.cond_mean(t.cut_mean()), slope * slope / t.cut_precision() + t.cond_var()};
}

Vector normal_draws(double m, double v, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Vector x = standard_normal(rng, static_cast<Eigen::Index>(n));
  return (m + std::sqrt(v) * x.array()).matrix();
}

}  // namespace

TEST(Rwm, StandardNormalMoments) {
  McmcConfig cfg;
  cfg.steps = 55000;
  cfg.burn_in = 5000;
  cfg.proposal_scale = Vector::Constant(1, 1.0);
  cfg.seed = 4;
  const auto s = rwm_chain(std_normal_log, Vector::Constant(1, 3.0), cfg);
  EXPECT_EQ(s.rows(), 50000);
  EXPECT_NEAR(s.draws.col(0).mean(), 0.0, 0.05);
  EXPECT_NEAR(cutpost::testing::variance(s.draws.col(0)), 1.0, 0.1);
}

TEST(Rwm, TinyProposalBarelyMoves) {
  McmcConfig cfg;
  cfg.steps = 2000;
  cfg.burn_in = 0;
  cfg.adapt = false;
  cfg.proposal_scale = Vector::Constant(1, 1e-12);
  const auto s = rwm_chain(std_normal_log, Vector::Constant(2, 0.5), cfg);
  EXPECT_GT(s.meta["acceptance"].get<double>(), 0.99);
  EXPECT_LE((s.draws.rowwise() - Eigen::RowVector2d(0.5, 0.5)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Rwm, SameSeedIsBitIdentical) {
  McmcConfig cfg;
  cfg.steps = 3000;
  cfg.burn_in = 1000;
  cfg.seed = 99;
  cfg.adapt_covariance = true;
  const auto a = rwm_chain(std_normal_log, Vector::Zero(3), cfg);
  const auto b = rwm_chain(std_normal_log, Vector::Zero(3), cfg);
  EXPECT_EQ(a.draws, b.draws);
  cfg.seed = 100;
  EXPECT_NE(rwm_chain(std_normal_log, Vector::Zero(3), cfg).draws, a.draws);
}

TEST(Rwm, AdaptationHitsTargetAcceptance) {
  for (bool cov : {false, true}) {
    McmcConfig cfg;
    cfg.steps = 30000;
    cfg.burn_in = 10000;
    cfg.proposal_scale = Vector::Constant(1, 0.01);
    cfg.adapt_covariance = cov;
    cfg.seed = 5;
    Vector sd(5);
    sd << 0.1, 1, 3, 10, 0.5;
    auto target = [&](const Vector& x) { return -0.5 * x.cwiseQuotient(sd).squaredNorm(); };
    const auto s = rwm_chain(target, Vector::Zero(5), cfg);
    EXPECT_NEAR(s.meta["acceptance"].get<double>(), 0.234, 0.1) << "covariance adaptation " << cov;
  }
}

TEST(Rwm, AllRejectedBurnInIsAWarning) {
  McmcConfig cfg;
  cfg.steps = 200;
  cfg.burn_in = 100;
  cfg.adapt = false;
  const Vector x0 = Vector::Constant(1, 0.25);
  auto spike = [&](const Vector& x) { return x == x0 ? 0.0 : kNegInf; };
  SampleSet s;
  ASSERT_NO_THROW(s = rwm_chain(spike, x0, cfg));
  EXPECT_EQ(s.meta["warnings"].size(), 2u);
  EXPECT_EQ(s.meta["acceptance"].get<double>(), 0.0);
}

TEST(Rwm, ConfigValidation) {
  McmcConfig cfg;
  cfg.steps = 10;
  cfg.burn_in = 10;
  EXPECT_THROW(rwm_chain(std_normal_log, Vector::Zero(1), cfg), ConfigError);
  cfg.steps = 20;
  cfg.thin = 0;
  EXPECT_THROW(rwm_chain(std_normal_log, Vector::Zero(1), cfg), ConfigError);
  cfg.thin = 1;
  cfg.proposal_scale = Vector::Constant(1, -1.0);
  EXPECT_THROW(rwm_chain(std_normal_log, Vector::Zero(1), cfg), ConfigError);
  cfg.proposal_scale = Vector::Constant(1, 1.0);
  EXPECT_THROW(rwm_chain([](const Vector&) { return kNegInf; }, Vector::Zero(1), cfg), ConfigError);
}

TEST(Sir, UniformWeightsGiveUniformMultinomial) {
  const std::size_t n = 10, k = 100000;
  Matrix draws(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i) draws(static_cast<Eigen::Index>(i), 0) = static_cast<double>(i);
  const Matrix out = sir(Vector::Zero(static_cast<Eigen::Index>(n)), draws, k, 12);
  std::vector<double> counts(n, 0.0), expected(n, static_cast<double>(k) / static_cast<double>(n));
  for (Eigen::Index r = 0; r < out.rows(); ++r) counts[static_cast<std::size_t>(out(r, 0))] += 1.0;
  EXPECT_GT(cutpost::testing::chi_square_gof_pvalue(counts, expected), 0.01);
}

TEST(Sir, SingleFiniteWeightRepeatsThatRow) {
  Vector lw = Vector::Constant(6, kNegInf);
  lw[3] = -1e3;
  Matrix draws = Matrix::Random(6, 2);
  const Matrix out = sir(lw, draws, 50, 1);
  for (Eigen::Index r = 0; r < out.rows(); ++r) EXPECT_EQ(out.row(r), draws.row(3));
}

TEST(Sir, ShiftInvariance) {
  Rng rng(3);
  const Vector lw = standard_normal(rng, 40);
  Matrix draws(40, 1);
  for (int i = 0; i < 40; ++i) draws(i, 0) = i;
  EXPECT_EQ(sir(lw, draws, 500, 8), sir((lw.array() + 123.0).matrix(), draws, 500, 8));
}

TEST(Sir, InvalidWeights) {
  EXPECT_THROW(sir(Vector::Constant(3, kNegInf), Matrix::Zero(3, 1), 2, 0), NumericError);
  Vector lw = Vector::Zero(3);
  lw[1] = std::nan("");
  EXPECT_THROW(sir(lw, Matrix::Zero(3, 1), 2, 0), NumericError);
  EXPECT_THROW(sir(Vector::Zero(2), Matrix::Zero(3, 1), 2, 0), ConfigError);
}

TEST(SampleCut, HpvPhiMatchesBetaDraws) {
  const auto d = models::hpv_simulate(101);
  const auto sys = models::hpv_system(d);
  McmcConfig cfg;
  cfg.seed = 10;
  const auto s = sample_cut(sys, 1000, CutStrategy{}, cfg);
  EXPECT_EQ(s.rows(), 1000);
  EXPECT_EQ(s.cols(), 15);
  EXPECT_EQ(s.meta["phi_stage"], "direct");
  Rng rng(555);
  for (std::size_t i = 0; i < 13; ++i) {
    Vector ref(1000);
    for (auto& x : ref) x = beta_draw(rng, d.z[i] + 1.0, d.N[i] - d.z[i] + 1.0);
    EXPECT_GT(ks_two_sample_pvalue(s.draws.col(static_cast<Eigen::Index>(i)), ref), 0.01) << "phi" << i + 1;
  }
}

TEST(SampleCut, PhiColumnsIgnoreModuleTwo) {
  const auto d = models::hpv_simulate(3);
  McmcConfig cfg;
  cfg.seed = 42;
  const auto a = sample_cut(models::hpv_system(d), 300, CutStrategy{}, cfg);
  const auto b = sample_cut(models::hpv_system(d, models::HpvLoss::quasi(75.0)), 300, CutStrategy{}, cfg);
  EXPECT_EQ(a.draws.leftCols(13), b.draws.leftCols(13));
  EXPECT_NE(a.draws.rightCols(2), b.draws.rightCols(2));

  // Also when phi is sampled by MCMC.
  auto ta = NormalToy::simulate(20, 20, 0.3, 1.0, 2);
  auto tb = ta;
  tb.w.array() += 5.0;
  tb.s2 = 0.3;
  const auto sa = sample_cut(ta.system(), 200, CutStrategy{}, cfg);
  const auto sb = sample_cut(tb.system(), 200, CutStrategy{}, cfg);
  EXPECT_EQ(sa.meta["phi_stage"], "mcmc");
  EXPECT_EQ(sa.draws.col(0), sb.draws.col(0));
}

TEST(SampleCut, ResultsDoNotDependOnThreads) {
  const auto sys = models::hpv_system(models::hpv_simulate(6));
  McmcConfig cfg;
  cfg.seed = 1;
  for (auto v : {CutVariant::conditional_normal, CutVariant::sir_t_proposal, CutVariant::nested_mcmc}) {
    CutStrategy st;
    st.variant = v;
    st.sir_proposals = 200;
    const auto a = sample_cut(sys, 64, st, cfg, 1);
    const auto b = sample_cut(sys, 64, st, cfg, 4);
    EXPECT_EQ(a.draws, b.draws) << to_string(v);
  }
}

TEST(SampleCut, ZeroLossDrawsFromPrior) {
  auto toy = NormalToy::simulate(20, 20, 0.3, 1.0, 2);
  auto sys = toy.system();
  sys.module2 = zero_loss(Block::eta, 20, 1);
  sys.phi_sampler = [&toy](Rng& rng, double) {
    return Vector::Constant(1, toy.cut_mean() + standard_normal(rng, 1)[0] / std::sqrt(toy.cut_precision()));
  };
  McmcConfig cfg;
  cfg.seed = 8;
  const auto s = sample_cut(sys, 4000, CutStrategy{}, cfg);
  // eta | phi ~ N(b phi, tau^2): check the conditional residuals directly.
  const Vector resid = (s.draws.col(1) - toy.b * s.draws.col(0)) / toy.tau;
  EXPECT_GT(ks_two_sample_pvalue(resid, normal_draws(0.0, 1.0, 4000, 77)), 0.01);
}

TEST(SampleCut, EveryVariantRecoversTheToyCutPosterior) {
  const auto toy = NormalToy::simulate(15, 25, 0.3, 1.0, 21);
  const auto sys = toy.system();
  const auto [m, v] = toy_cut_eta_moments(toy);
  McmcConfig cfg;
  cfg.seed = 10;
  cfg.burn_in = 2000;
  cfg.thin = 10;
  cfg.proposal_scale = Vector::Constant(1, 0.5);
  for (auto var : {CutVariant::conditional_normal, CutVariant::sir_t_proposal, CutVariant::nested_mcmc}) {
    CutStrategy st;
    st.variant = var;
    const auto s = sample_cut(sys, 1500, st, cfg);
    EXPECT_GT(ks_two_sample_pvalue(s.draws.col(1), normal_draws(m, v, 1500, 3)), 0.01) << to_string(var);
    EXPECT_GT(ks_two_sample_pvalue(s.draws.col(0),
                                   normal_draws(toy.cut_mean(), 1.0 / toy.cut_precision(), 1500, 4)),
              0.01);
  }
}

TEST(SampleCut, FailedStagesAreRedrawnAndCounted) {
  auto toy = NormalToy::simulate(15, 25, 0.3, 1.0, 21);
  auto sys = toy.system();
  sys.phi_sampler = [](Rng& rng, double) { return Vector::Constant(1, uniform01(rng)); };
  auto base = sys.module2.loss;
  // The conditional stage fails on 2% of the phi range.
  sys.module2.loss = [base](std::size_t i, const Vector& e, const Vector& p) {
    return p[0] > 0.98 ? std::nan("") : base(i, e, p);
  };
  McmcConfig cfg;
  cfg.seed = 3;
  const auto s = sample_cut(sys, 1000, CutStrategy{}, cfg);
  EXPECT_GT(s.meta["conditional_failures"].get<std::size_t>(), 0u);
  EXPECT_LE(s.draws.col(0).maxCoeff(), 0.98);

  sys.module2.loss = [base](std::size_t i, const Vector& e, const Vector& p) {
    return p[0] > 0.5 ? std::nan("") : base(i, e, p);
  };
  EXPECT_THROW(sample_cut(sys, 1000, CutStrategy{}, cfg), NumericError);
}

TEST(SampleFull, ConjugateMomentsMatch) {
  const auto toy = NormalToy::simulate(15, 25, 0.3, 1.0, 21);
  McmcConfig cfg;
  cfg.seed = 2;
  cfg.burn_in = 5000;
  cfg.thin = 5;
  const auto s = sample_full(toy.system(), 20000, cfg);
  const double sd = 1.0 / std::sqrt(toy.full_precision());
  EXPECT_NEAR(s.draws.col(0).mean(), toy.full_mean(), 0.05 * sd);
  EXPECT_NEAR(std::sqrt(cutpost::testing::variance(s.draws.col(0))), sd, 0.05 * sd);
}

TEST(SampleFull, ZeroNuPrimeGivesCutMarginal) {
  auto toy = NormalToy::simulate(15, 25, 0.3, 1.0, 21);
  toy.nu_prime = 0.0;
  McmcConfig cfg;
  cfg.seed = 6;
  cfg.burn_in = 5000;
  cfg.thin = 20;
  const auto s = sample_full(toy.system(), 1000, cfg);
  EXPECT_GT(ks_two_sample_pvalue(s.draws.col(0), normal_draws(toy.cut_mean(), 1.0 / toy.cut_precision(), 1000, 5)),
            0.01);
}

TEST(SampleFull, SameSeedIsBitIdentical) {
  const auto sys = models::hpv_system(models::hpv_simulate(1));
  McmcConfig cfg;
  cfg.seed = 17;
  cfg.burn_in = 500;
  const auto a = sample_full(sys, 200, cfg);
  const auto b = sample_full(sys, 200, cfg);
  EXPECT_EQ(a.draws, b.draws);
  EXPECT_EQ(a.source, SampleSource::full);
}
