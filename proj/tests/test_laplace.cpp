#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cutpost/cutpost.hpp"
#include "support/toy_models.hpp"

using namespace cutpost;
using cutpost::testing::NormalToy;

namespace {

double polygon_area(const Matrix& p) {
  double a = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Eigen::Index j = (i + 1) % p.rows();
    a += p(i, 0) * p(j, 1) - p(j, 0) * p(i, 1);
  }
  return 0.5 * std::abs(a);
}

}  // namespace

TEST(ConditionalLaplace, QuadraticLossGivesMeanPhiVarianceOneOverN) {
  TwoModuleSystem s;
  s.phi_names = {"p"};
  s.eta_names = {"e"};
  s.module1 = zero_loss(Block::phi, 1, 1);
  s.module2.wrt = Block::eta;
  s.module2.n_obs = 50;
  s.module2.loss = [](std::size_t, const Vector& e, const Vector& p) { return 0.5 * (e - p).squaredNorm(); };
  s.prior_phi = flat_prior(Block::phi, 1);
  s.prior_eta = flat_prior(Block::eta, 1);
  const auto cn = conditional_laplace(s, Vector::Constant(1, 1.25));
  EXPECT_NEAR(cn.mean[0], 1.25, 1e-8);
  EXPECT_NEAR(cn.covariance()(0, 0), 1.0 / 50.0, 1e-9);
  EXPECT_NEAR(cn.precision(0, 0), 50.0, 1e-6);
}

TEST(ConditionalLaplace, ConjugateLargeSampleAgreement) {
  double prev_scaled = -1.0;
  for (std::size_t n2 : {100u, 1000u, 10000u}) {
    auto toy = NormalToy::simulate(10, n2, 0.5, 2.0, 31);
    toy.center = ConditionalCenter::loss_mode;
    const auto sys = toy.system();
    const double phi = 0.8;
    const auto cn = conditional_laplace(sys, Vector::Constant(1, phi));
    const double dm = std::abs(cn.mean[0] - toy.cond_mean(phi));
    const double ratio = cn.covariance()(0, 0) / toy.cond_var();
    // Both gaps are O(1/n2).
    EXPECT_LE(dm * static_cast<double>(n2), 10.0);
    EXPECT_LE(std::abs(ratio - 1.0) * static_cast<double>(n2), 5.0);
    if (n2 == 10000u) EXPECT_NEAR(ratio, 1.0, 1e-3);
    prev_scaled = dm;
  }
  EXPECT_GE(prev_scaled, 0.0);
}

TEST(ConditionalLaplace, ExactGaussianConditionalHasZeroDistance) {
  auto toy = NormalToy::simulate(10, 30, 0.5, 2.0, 7);
  toy.nu_prime = 0.6;
  const auto sys = toy.system();
  for (double phi : {-1.0, 0.0, 2.5}) {
    const auto cn = conditional_laplace(sys, Vector::Constant(1, phi));
    const double m = toy.cond_mean(phi), v = toy.cond_var();
    const double va = cn.covariance()(0, 0);
    // TV(N(m1, v1), N(m2, v2)) <= 3/2 |v1/v2 - 1| + |m1 - m2| / (2 sqrt(v2)).
    const double tv = 1.5 * std::abs(va / v - 1.0) + std::abs(cn.mean[0] - m) / (2.0 * std::sqrt(v));
    EXPECT_LT(tv, 1e-10);
  }
}

TEST(ConditionalLaplace, PrecisionPdOverCutPosteriorRegion) {
  const auto hpv = models::hpv_system(models::hpv_simulate(13));
  const auto re = models::re_system(models::re_simulate(100, 10, 1.0, {0.5}, {{0, 10.0}}, 13));
  const auto re_t = models::re_system(models::re_simulate(100, 10, 1.0, {0.5}, {{0, 10.0}}, 13),
                                      models::ReLoss::tukey(5.0));
  for (const auto* sys : {&hpv, &re, &re_t}) {
    Rng rng = make_rng(3, Stream::phi);
    for (int k = 0; k < 100; ++k) {
      const Vector phi = sys->draw_phi(rng);
      ConditionalNormal cn;
      ASSERT_NO_THROW(cn = conditional_laplace(*sys, phi)) << sys->label;
      Eigen::SelfAdjointEigenSolver<Matrix> es(cn.precision, Eigen::EigenvaluesOnly);
      EXPECT_GT(es.eigenvalues().minCoeff(), 0.0) << sys->label;
    }
  }
}

TEST(ConditionalLaplace, HpvEllipseAreaOrderFollowsDeterminants) {
  const auto sys = models::hpv_system(models::hpv_simulate(23));
  Rng rng = make_rng(1, Stream::phi);
  Matrix phi(400, 13);
  for (Eigen::Index s = 0; s < 400; ++s) phi.row(s) = sys.draw_phi(rng).transpose();
  const auto t = propagation_table(sys, phi);
  const auto rows = select_by_logdet_quantiles(t, {0.05, 0.25, 0.5, 0.75, 0.95});
  std::vector<double> areas, logdets;
  for (auto r : rows) {
    const auto cn = conditional_laplace(sys, Vector(t.phi.row(static_cast<Eigen::Index>(r)).transpose()));
    logdets.push_back(-cn.log_det_precision());
    EXPECT_NEAR(logdets.back(), t.logdet[static_cast<Eigen::Index>(r)], 1e-9);
    areas.push_back(polygon_area(ellipse_polyline(cn, 0.05)));
  }
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_LE(logdets[i - 1], logdets[i]);
    EXPECT_LE(areas[i - 1], areas[i]);
  }
}

TEST(MarginalLaplace, GaussianModuleOneIsExact) {
  const auto toy = NormalToy::simulate(40, 5, 1.3, 0.0, 4);
  auto sys = toy.system();
  sys.prior_phi = flat_prior(Block::phi, 1);
  const auto g = marginal_laplace_phi(sys);
  EXPECT_NEAR(g.mean[0], toy.z.mean(), 1e-10);
  EXPECT_NEAR(g.covariance(0, 0), toy.s1 * toy.s1 / 40.0, 1e-12);
}

TEST(MarginalLaplace, HpvMeanIsMleNearBetaMean) {
  // Seed without a zero count, so every coordinate has an interior maximum.
  const auto d = models::hpv_simulate(12);
  const auto g = marginal_laplace_phi(models::hpv_system(d));
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.z[i] == 0) continue;
    const double mle = d.z[i] / d.N[i];
    const double beta_mean = (d.z[i] + 1.0) / (d.N[i] + 2.0);
    EXPECT_NEAR(g.mean[static_cast<Eigen::Index>(i)], mle, 1e-8);
    EXPECT_LE(std::abs(g.mean[static_cast<Eigen::Index>(i)] - beta_mean), 1.0 / d.N[i]);
  }
}

TEST(MarginalLaplace, SymmetricDataGivesZeroMean) {
  TwoModuleSystem s;
  s.phi_names = {"p"};
  s.eta_names = {"e"};
  const std::vector<double> z{-2.0, -0.5, 0.5, 2.0};
  s.module1.wrt = Block::phi;
  s.module1.n_obs = z.size();
  s.module1.loss = [z](std::size_t i, const Vector&, const Vector& p) { return std::cosh(p[0] - z[i]); };
  s.module2 = zero_loss(Block::eta, 1, 1);
  s.prior_phi = flat_prior(Block::phi, 1);
  s.prior_eta = flat_prior(Block::eta, 1);
  s.phi_init = Vector::Constant(1, 0.7);
  EXPECT_NEAR(marginal_laplace_phi(s).mean[0], 0.0, 1e-8);
}

TEST(JointLaplace, DecoupledBlocksAreBlockDiagonal) {
  Matrix s11(2, 2), s22(1, 1);
  s11 << 2, 0.3, 0.3, 1;
  s22 << 4;
  const auto j = joint_normal_from_blocks(Vector::Zero(3), s11, Matrix::Zero(2, 1), s22, 1.0, 10, 20);
  EXPECT_LE((j.V.topLeftCorner(2, 2) - s11.inverse()).norm(), 1e-12);
  EXPECT_NEAR(j.V(2, 2), 0.25, 1e-12);
  EXPECT_EQ(j.V.topRightCorner(2, 1).norm(), 0.0);
}

TEST(JointLaplace, ScalarBlockFormula) {
  const double sigma = 0.6;
  const auto j = joint_normal_from_blocks(Vector::Zero(2), Matrix::Ones(1, 1), Matrix::Constant(1, 1, sigma),
                                          Matrix::Ones(1, 1), 1.0, 1, 1);
  EXPECT_NEAR(j.V(1, 1), 1.0 + sigma * sigma, 1e-14);
  EXPECT_NEAR(j.V(0, 1), -sigma, 1e-14);
}

TEST(JointLaplace, LinearGaussianCovarianceIsExact) {
  auto toy = NormalToy::simulate(30, 20, 0.4, 1.0, 8);
  toy.center = ConditionalCenter::loss_mode;
  const auto sys = toy.system();
  const auto j = joint_laplace(sys);
  // phi ~ N(zbar, s1^2 / n1); eta | phi = wbar - a phi + N(0, s2^2 / n2).
  const double v = toy.s1 * toy.s1 / 30.0, e = toy.s2 * toy.s2 / 20.0;
  EXPECT_NEAR(j.mean[0], toy.z.mean(), 1e-9);
  EXPECT_NEAR(j.mean[1], toy.ybar(toy.z.mean()), 1e-9);
  EXPECT_NEAR(j.covariance(0, 0), v, 1e-9);
  EXPECT_NEAR(j.covariance(0, 1), -toy.a * v, 1e-7);
  EXPECT_NEAR(j.covariance(1, 1), toy.a * toy.a * v + e, 1e-7);
  EXPECT_NEAR(j.conditional_covariance_eta()(0, 0), e, 1e-7);
  EXPECT_NEAR(j.conditional_mean_eta(Vector::Constant(1, 2.0))[0], toy.ybar(2.0), 1e-6);
}

TEST(JointLaplace, HpvConditionalCovarianceIsConstantButLaplaceIsNot) {
  const auto sys = models::hpv_system(models::hpv_simulate(18));
  const auto j = joint_laplace(sys);
  const Matrix cc = j.conditional_covariance_eta();
  Rng rng = make_rng(2, Stream::phi);
  std::vector<Matrix> covs;
  for (int k = 0; k < 3; ++k) covs.push_back(conditional_laplace(sys, sys.draw_phi(rng)).covariance());
  // The joint approximation has one conditional covariance for every phi.
  const Vector p1 = sys.phi_init, p2 = sys.phi_init * 1.1;
  EXPECT_NE(j.conditional_mean_eta(p1), j.conditional_mean_eta(p2));
  EXPECT_GT((covs[0] - covs[1]).norm(), 1e-6 * covs[0].norm());
  EXPECT_GT((covs[1] - covs[2]).norm(), 1e-6 * covs[1].norm());
  EXPECT_EQ(Eigen::LLT<Matrix>(cc).info(), Eigen::Success);
}

TEST(JointLaplace, SingularSigma22Throws) {
  EXPECT_THROW(joint_normal_from_blocks(Vector::Zero(2), Matrix::Ones(1, 1), Matrix::Zero(1, 1),
                                        Matrix::Zero(1, 1), 1.0, 1, 1),
               NumericError);
}
