#include <gtest/gtest.h>

#include <cmath>

#include "cutpost/cutpost.hpp"
#include "support/toy_models.hpp"

using namespace cutpost;
using cutpost::testing::NormalToy;

namespace {

// M(eta | phi) = -n2 (eta - phi)^2 / 2 in d dimensions: one observation per
// "unit" with loss (eta - phi)^2 / 2.
TwoModuleSystem quadratic_system(std::size_t n2, Eigen::Index d) {
  TwoModuleSystem s;
  for (Eigen::Index i = 0; i < d; ++i) {
    s.phi_names.push_back("p" + std::to_string(i));
    s.eta_names.push_back("e" + std::to_string(i));
  }
  s.module1 = zero_loss(Block::phi, 1, d);
  s.module2.wrt = Block::eta;
  s.module2.n_obs = n2;
  s.module2.loss = [](std::size_t, const Vector& e, const Vector& p) { return 0.5 * (e - p).squaredNorm(); };
  s.module2.grad = [](std::size_t, const Vector& e, const Vector& p) { return Vector(e - p); };
  s.module2.hess = [d](std::size_t, const Vector&, const Vector&) { return Matrix(Matrix::Identity(d, d)); };
  s.prior_phi = flat_prior(Block::phi, d);
  s.prior_eta = flat_prior(Block::eta, d);
  return s;
}

// Best point of a 400 x 400 grid, zoomed around the incumbent until the
// spacing is far below the tolerance.
Vector grid_argmax(const std::function<double(const Vector&)>& f, Vector lo, Vector hi) {
  const int n = 400;
  Vector best = 0.5 * (lo + hi);
  for (int level = 0; level < 5; ++level) {
    double fb = -std::numeric_limits<double>::infinity();
    const Vector step = (hi - lo) / (n - 1);
    Vector x(2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        x << lo[0] + i * step[0], lo[1] + j * step[1];
        const double v = f(x);
        if (v > fb) {
          fb = v;
          best = x;
        }
      }
    lo = best - 4.0 * step;
    hi = best + 4.0 * step;
  }
  return best;
}

}  // namespace

TEST(SolveConditionalMode, QuadraticGivesPhiAndUnitCurvature) {
  const auto sys = quadratic_system(25, 3);
  Vector phi(3);
  phi << 0.4, -1.2, 7.0;
  const auto r = solve_conditional_mode(sys, phi);
  ASSERT_TRUE(r.converged);
  EXPECT_LE((r.eta_hat - phi).norm(), 1e-12);
  EXPECT_LE((r.J - Matrix::Identity(3, 3)).norm(), 1e-12);
  EXPECT_LE(r.grad_norm, 1e-8);
  EXPECT_EQ(r.jitter, 0.0);
}

TEST(SolveConditionalMode, QuadraticConvergesInTwoNewtonSteps) {
  const auto sys = quadratic_system(10, 2);
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    const Vector phi = standard_normal(rng, 2);
    const Vector init = 100.0 * standard_normal(rng, 2);
    const auto r = solve_conditional_mode(sys, phi, init);
    ASSERT_TRUE(r.converged);
    EXPECT_LE(r.iterations, 2u);
  }
}

TEST(SolveConditionalMode, HpvPoissonMatchesGridSearch) {
  const auto d = models::hpv_simulate(17);
  const auto sys = models::hpv_system(d);
  Vector phi(13);
  for (std::size_t i = 0; i < 13; ++i) phi[static_cast<Eigen::Index>(i)] = (d.z[i] + 1.0) / (d.N[i] + 2.0);
  const auto r = solve_conditional_mode(sys, phi);
  ASSERT_TRUE(r.converged) << r.message;
  auto M = [&](const Vector& e) { return -module_loss(sys.module2, e, phi); };
  Vector lo(2), hi(2);
  lo << -6.0, -20.0;
  hi << 2.0, 60.0;
  const Vector g = grid_argmax(M, lo, hi);
  EXPECT_NEAR(r.eta_hat[0], g[0], 1e-4);
  EXPECT_NEAR(r.eta_hat[1], g[1], 1e-4);
}

TEST(SolveConditionalMode, TukeyZeroResidualsGradientVanishes) {
  Matrix y(3, 4);
  y << 1, 2, 3, 4, -2, -1, 0, 1, 5, 5.5, 6, 6.5;
  const auto d = models::ReData::from_raw(y);
  const auto sys = models::re_system(d, models::ReLoss::tukey(5.0));
  Vector eta(4);
  eta << d.w, 1.0;
  const Vector phi = Vector::Constant(3, 0.8);
  const Vector g = module_gradient(sys.module2, eta, phi);
  EXPECT_LE(g.norm(), 1e-14);
}

TEST(SolveConditionalMode, NonConvergenceIsReported) {
  const auto sys = models::hpv_system(models::hpv_simulate(2));
  const Vector phi = sys.phi_init;
  NewtonOptions opt;
  opt.max_iterations = 1;
  const auto r = solve_conditional_mode(sys, phi, std::nullopt, opt);
  EXPECT_FALSE(r.converged);
  EXPECT_FALSE(r.message.empty());
}

TEST(SolveConditionalMode, IndefiniteCurvatureNamesEigenvalue) {
  auto sys = quadratic_system(4, 2);
  // Saddle at the origin: loss e0^2/2 - e1^2/2.
  sys.module2.loss = [](std::size_t, const Vector& e, const Vector&) { return 0.5 * (e[0] * e[0] - e[1] * e[1]); };
  sys.module2.grad = [](std::size_t, const Vector& e, const Vector&) {
    Vector g(2);
    g << e[0], -e[1];
    return g;
  };
  sys.module2.hess = [](std::size_t, const Vector&, const Vector&) {
    Matrix h = Matrix::Zero(2, 2);
    h(0, 0) = 1.0;
    h(1, 1) = -1.0;
    return h;
  };
  try {
    solve_conditional_mode(sys, Vector::Zero(2), Vector(Vector::Zero(2)));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("smallest eigenvalue -1"), std::string::npos) << e.what();
  }
}

TEST(SolveConditionalMode, ModeIsStableUnderInitPerturbation) {
  const auto d = models::hpv_simulate(5);
  const auto sys = models::hpv_system(d, models::HpvLoss::quasi(75.0));
  const Vector phi = sys.phi_init;
  const auto base = solve_conditional_mode(sys, phi);
  ASSERT_TRUE(base.converged);
  Rng rng(1);
  for (int k = 0; k < 10; ++k) {
    const Vector init = base.eta_hat + 0.3 * standard_normal(rng, 2);
    const auto r = solve_conditional_mode(sys, phi, init);
    ASSERT_TRUE(r.converged);
    EXPECT_LE((r.eta_hat - base.eta_hat).norm(), 1e-6);
  }
}

TEST(SolveConditionalMode, JAgreesWithHessianEta) {
  const auto d = models::hpv_simulate(8);
  const auto sys = models::hpv_system(d);
  const auto r = solve_conditional_mode(sys, sys.phi_init);
  ASSERT_TRUE(r.converged);
  const Matrix h = hessian_eta(sys, r.eta_hat, sys.phi_init) / static_cast<double>(sys.n2());
  EXPECT_LE((h - r.J).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, r.J.cwiseAbs().maxCoeff()));

  const auto re = models::re_system(models::re_simulate(10, 5, 1.0, {0.5}, {}, 2));
  const auto rr = solve_conditional_mode(re, re.phi_init);
  ASSERT_TRUE(rr.converged) << rr.message;
  const Matrix hr = hessian_eta(re, rr.eta_hat, re.phi_init) / static_cast<double>(re.n2());
  EXPECT_LE((hr - rr.J).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, rr.J.cwiseAbs().maxCoeff()));
}

TEST(HessianEta, QuadraticIsConstant) {
  const auto sys = quadratic_system(7, 2);
  Rng rng(2);
  for (int k = 0; k < 5; ++k) {
    const Matrix h = hessian_eta(sys, standard_normal(rng, 2), standard_normal(rng, 2));
    EXPECT_EQ(h, Matrix(7.0 * Matrix::Identity(2, 2)));
  }
}

TEST(HessianEta, GaussianEqualsFisherInformationTimesN) {
  auto toy = NormalToy::simulate(5, 40, 0.0, 1.0, 2);
  toy.center = ConditionalCenter::loss_mode;
  const auto sys = toy.system();
  const Vector phi = Vector::Constant(1, 0.2);
  const auto r = solve_conditional_mode(sys, phi);
  ASSERT_TRUE(r.converged);
  // The mode of M is the MLE of the mean; the Fisher information is 1 / s2^2.
  EXPECT_NEAR(r.eta_hat[0], toy.ybar(0.2), 1e-12);
  const Matrix h = hessian_eta(sys, r.eta_hat, phi);
  EXPECT_NEAR(h(0, 0), 40.0 / (toy.s2 * toy.s2), 1e-10);
}

TEST(HessianEta, FiniteDifferenceFallbackIsSymmetric) {
  auto sys = models::hpv_system(models::hpv_simulate(3));
  sys.module2.hess = nullptr;
  const Vector eta = Eigen::Vector2d(-2.0, 12.0);
  const Matrix h = hessian_eta(sys, eta, sys.phi_init);
  EXPECT_EQ(h, h.transpose());
  sys.module2.grad = nullptr;
  const Matrix h2 = hessian_eta(sys, eta, sys.phi_init);
  EXPECT_EQ(h2, h2.transpose());
  const Matrix ha = hessian_eta(models::hpv_system(models::hpv_simulate(3)), eta, sys.phi_init);
  EXPECT_LE((h - ha).cwiseAbs().maxCoeff(), 1e-6 * ha.cwiseAbs().maxCoeff());
  EXPECT_LE((h2 - ha).cwiseAbs().maxCoeff(), 1e-4 * ha.cwiseAbs().maxCoeff());
}

TEST(HessianEta, NonFiniteThrows) {
  auto sys = quadratic_system(3, 1);
  sys.module2.hess = [](std::size_t, const Vector&, const Vector&) {
    return Matrix(Matrix::Constant(1, 1, std::nan("")));
  };
  EXPECT_THROW(hessian_eta(sys, Vector::Zero(1), Vector::Zero(1)), NumericError);
}

TEST(PositiveDefinite, JitterRepairsFlatDirection) {
  Matrix j = Matrix::Zero(2, 2);
  j(0, 0) = 2.0;
  double jitter = -1.0;
  const Matrix r = make_positive_definite(j, &jitter);
  EXPECT_GT(jitter, 0.0);
  EXPECT_LE(jitter, 1e-2);
  EXPECT_EQ(Eigen::LLT<Matrix>(r).info(), Eigen::Success);
  EXPECT_NEAR(r(1, 1), jitter * 1.0, 1e-20);
}

TEST(PositiveDefinite, LeavesPdUntouched) {
  Matrix j(2, 2);
  j << 2, 0.5, 0.5, 1;
  double jitter = -1.0;
  EXPECT_EQ(make_positive_definite(j, &jitter), j);
  EXPECT_EQ(jitter, 0.0);
}

TEST(SolvePhiMode, HpvMatchesMle) {
  const auto d = models::hpv_simulate(9);
  const auto sys = models::hpv_system(d);
  const auto r = solve_phi_mode(sys);
  ASSERT_TRUE(r.converged) << r.message;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.z[i] > 0) EXPECT_NEAR(r.x[static_cast<Eigen::Index>(i)], d.z[i] / d.N[i], 1e-8);
}
