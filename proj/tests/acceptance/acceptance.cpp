// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//
//   cutpost_acceptance [criterion numbers...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cutpost/cutpost.hpp"
#include "support/stats.hpp"
#include "support/toy_models.hpp"

using namespace cutpost;
using cutpost::testing::ks_two_sample_pvalue;
using cutpost::testing::NormalToy;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::pair<double, double> interval95(Vector x) {
  std::sort(x.data(), x.data() + x.size());
  auto q = [&](double p) {
    const double h = p * static_cast<double>(x.size() - 1);
    const auto lo = static_cast<Eigen::Index>(std::floor(h));
    const auto hi = std::min<Eigen::Index>(lo + 1, x.size() - 1);
    return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
  };
  return {q(0.025), q(0.975)};
}

double jaccard(std::pair<double, double> a, std::pair<double, double> b) {
  const double inter = std::max(0.0, std::min(a.second, b.second) - std::max(a.first, b.first));
  const double uni = std::max(a.second, b.second) - std::min(a.first, b.first);
  return uni > 0.0 ? inter / uni : 0.0;
}

// Conjugacy oracle: cut phi marginals against direct Beta draws.
Outcome criterion1() {
  const auto t0 = Clock::now();
  const auto d = models::hpv_simulate(101);
  const auto sys = models::hpv_system(d);
  McmcConfig cfg;
  cfg.seed = 10;
  const SampleSet s = sample_cut(sys, 1000, CutStrategy{}, cfg);
  Rng rng(555);
  double min_p = 1.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    Vector ref(1000);
    for (auto& x : ref) x = beta_draw(rng, d.z[i] + 1.0, d.N[i] - d.z[i] + 1.0);
    min_p = std::min(min_p, ks_two_sample_pvalue(Vector(s.draws.col(static_cast<Eigen::Index>(i))), ref));
  }
  const double secs = seconds_since(t0);
  return {min_p > 0.01 && secs < 10.0,
          "min KS p over 13 phi_i = " + fmt("%.3f", min_p) + ", " + fmt("%.1f", secs) + " s (limit 10 s)"};
}

// Conditional normal against SIR with t proposals on the eta marginals.
Outcome criterion2() {
  const auto t0 = Clock::now();
  const auto sys = models::hpv_system(models::hpv_simulate(0));
  const std::size_t S = 20000;
  McmcConfig cfg;
  cfg.seed = 3;
  CutStrategy normal, sir;
  sir.variant = CutVariant::sir_t_proposal;
  sir.sir_proposals = 1000;
  const SampleSet a = sample_cut(sys, S, normal, cfg);
  cfg.seed = 4;
  const SampleSet b = sample_cut(sys, S, sir, cfg);
  double worst = 0.0;
  std::string each;
  for (Eigen::Index k = 13; k < 15; ++k) {
    const double w = wasserstein1_1d(Vector(a.draws.col(k)), Vector(b.draws.col(k)));
    worst = std::max(worst, w);
    each += a.names[static_cast<std::size_t>(k)] + " " + fmt("%.4f", w) + " ";
  }
  const double secs = seconds_since(t0);
  return {worst <= 0.1 && secs < 120.0,
          "W1 " + each + "(bound 0.1), S = " + std::to_string(S) + ", " + fmt("%.1f", secs) + " s (limit 120 s)"};
}

// Chib identity against the closed-form conjugate marginal likelihood.
Outcome criterion3() {
  const auto toy = NormalToy::simulate(12, 30, 0.5, -1.0, 77);
  const auto sys = toy.system();
  Rng rng(5);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const double phi = 3.0 * standard_normal(rng, 1)[0];
    const auto cn = conditional_laplace(sys, Vector::Constant(1, phi));
    const double sd = std::sqrt(toy.cond_var());
    for (double off : {0.0, 1.5, -4.0}) {
      const double v = chib_log_mhat(sys, cn, Vector::Constant(1, cn.mean[0] + off * sd));
      worst = std::max(worst, std::abs(v - toy.exact_log_m(phi)));
    }
  }
  return {worst < 1e-8, "max |ln m_hat - ln m| = " + fmt("%.2e", worst) + " over 20 phi x 3 eta* (bound 1e-8)"};
}

// SMI endpoints against the cut and full samplers.
Outcome criterion4() {
  const auto t0 = Clock::now();
  std::ostringstream msg;
  bool ok = true;
  {
    const auto toy = NormalToy::simulate(12, 30, 0.5, -1.0, 77);
    const auto sys = toy.system();
    McmcConfig cfg;
    cfg.seed = 4;
    cfg.burn_in = 2000;
    cfg.thin = 20;
    cfg.proposal_scale = Vector::Constant(1, 0.5);
    const SampleSet cut = sample_cut(sys, 1000, CutStrategy{}, cfg);
    const SampleSet full = sample_full(sys, 1000, cfg);
    SmiConfig smi;
    smi.cfg.seed = 5;
    smi.cfg.burn_in = 2000;
    smi.cfg.thin = 20;
    smi.gamma = 0.0;
    const double p0 = ks_two_sample_pvalue(Vector(cut.draws.col(0)), Vector(sample_smi(sys, 1000, smi).draws.col(0)));
    smi.gamma = 1.0;
    const double p1 = ks_two_sample_pvalue(Vector(full.draws.col(0)), Vector(sample_smi(sys, 1000, smi).draws.col(0)));
    ok = ok && p0 > 0.01 && p1 > 0.01;
    msg << "conjugate: gamma 0 vs cut p = " << fmt("%.3f", p0) << ", gamma 1 vs full p = " << fmt("%.3f", p1);
  }
  {
    // 13-dimensional phi; heavy thinning removes the random-walk autocorrelation.
    const auto sys = models::hpv_system(models::hpv_simulate(0));
    McmcConfig cfg;
    cfg.seed = 7;
    const SampleSet cut = sample_cut(sys, 1000, CutStrategy{}, cfg);
    SmiConfig smi;
    smi.gamma = 0.0;
    smi.cfg.seed = 7;
    smi.cfg.burn_in = 5000;
    smi.cfg.thin = 500;
    smi.cfg.adapt_covariance = true;
    const SampleSet s = sample_smi(sys, 1000, smi);
    double min_p = 1.0;
    for (Eigen::Index k = 0; k < 13; ++k)
      min_p = std::min(min_p, ks_two_sample_pvalue(Vector(cut.draws.col(k)), Vector(s.draws.col(k))));
    ok = ok && min_p > 0.01;
    msg << "; hpv: gamma 0 vs cut min p over 13 phi_i = " << fmt("%.3f", min_p);
  }
  const double secs = seconds_since(t0);
  msg << ", " << fmt("%.1f", secs) << " s (limit 120 s)";
  return {ok && secs < 120.0, msg.str()};
}

// Learning-rate calibration sanity.
Outcome criterion5() {
  auto toy = NormalToy::simulate(10000, 10000, 0.7, -0.3, 5);
  toy.center = ConditionalCenter::loss_mode;
  const auto r = calibrate(toy.system());
  const double two = learning_rate_from_blocks(2.0 * Matrix::Identity(3, 3), Matrix::Identity(3, 3));
  const bool ok = r.nu >= 0.9 && r.nu <= 1.1 && r.nu_prime >= 0.9 && r.nu_prime <= 1.1 && two == 2.0;
  return {ok, "gaussian n = 1e4: nu = " + fmt("%.4f", r.nu) + ", nu' = " + fmt("%.4f", r.nu_prime) +
                  " (band [0.9, 1.1]); Sigma = 2I, Psi = I gives " + fmt("%.17g", two)};
}

// Random-effects benchmark over 100 simulated data sets.
Outcome criterion6() {
  const auto t0 = Clock::now();
  const int reps = 100;
  int cut_cover = 0, full_cover = 0;
  std::vector<double> jac, nus;
  for (int r = 0; r < reps; ++r) {
    const auto seed = static_cast<std::uint64_t>(r);
    const auto d = models::re_simulate(100, 10, 1.0, {0.5}, {{0, 10.0}}, 5000 + seed);
    const auto gauss = models::re_system(d, models::ReLoss::gaussian());
    auto tukey = models::re_system(d, models::ReLoss::tukey(5.0));

    McmcConfig cfg;
    cfg.seed = seed;
    const SampleSet cut = sample_cut(gauss, 1000, CutStrategy{}, cfg);
    const auto ci_cut = interval95(cut.draws.col(0));
    cut_cover += ci_cut.first <= 0.5 && 0.5 <= ci_cut.second;

    // the Gaussian model draws with its collapsed sampler, which mixes in far fewer sweeps
    McmcConfig gc;
    gc.seed = seed;
    gc.burn_in = 1000;
    gc.thin = 5;
    const auto ci_full = interval95(sample_full(gauss, 1000, gc).draws.col(0));

    McmcConfig fc;
    fc.seed = seed;
    fc.burn_in = 20000;
    fc.thin = 50;
    full_cover += ci_full.first <= 0.5 && 0.5 <= ci_full.second;

    BootstrapOptions bo;
    bo.B = 1000;
    bo.seed = seed;
    bo.eta_mask = models::re_beta_mask(d);
    const auto cal = calibrate_nu2_bootstrap(tukey, models::re_grouped_data(d, models::ReLoss::tukey(5.0)), bo);
    tukey.nu_prime = cal.nu_prime;
    nus.push_back(cal.nu_prime);
    const auto ci_tukey = interval95(sample_full(tukey, 1000, fc).draws.col(0));
    jac.push_back(jaccard(ci_tukey, ci_cut));
  }
  std::sort(jac.begin(), jac.end());
  std::sort(nus.begin(), nus.end());
  const double med = 0.5 * (jac[reps / 2 - 1] + jac[reps / 2]);
  const double nu_med = 0.5 * (nus[reps / 2 - 1] + nus[reps / 2]);
  const double secs = seconds_since(t0);
  const bool ok = cut_cover >= 90 && full_cover < 50 && med >= 0.5 && secs < 1200.0;
  return {ok, "cut covers phi_1 = 0.5 in " + std::to_string(cut_cover) + "/100 (need >= 90), gaussian full in " +
                  std::to_string(full_cover) + "/100 (need < 50), tukey full vs cut median Jaccard " +
                  fmt("%.3f", med) + " (need >= 0.5, median nu' " + fmt("%.2f", nu_med) + "), " +
                  fmt("%.0f", secs) + " s (limit 1200 s)"};
}

CredibleSetResult credible_for(Eigen::Index d, double alpha, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix a = Matrix::NullaryExpr(d, d, [&] { return standard_normal(rng, 1)[0]; });
  InnerSolveResult res;
  res.eta_hat = standard_normal(rng, d);
  res.J = a * a.transpose() + Matrix::Identity(d, d);
  res.converged = true;
  return credible_set_mc(ConditionalNormal(Vector(), res, 1.0, 1.0), alpha, 100000, seed + 1);
}

// Monte Carlo credible set retains 1 - alpha of its draws.
Outcome criterion7() {
  bool ok = true;
  double worst = 0.0;
  for (Eigen::Index d : {1, 2, 5})
    for (double alpha : {0.5, 0.1, 0.05}) {
      const auto r = credible_for(d, alpha, static_cast<std::uint64_t>(100 * d + std::lround(100 * alpha)));
      const double tol = 3.0 * std::sqrt(alpha * (1.0 - alpha) / 1e5);
      const double dev = std::abs(r.fraction() - (1.0 - alpha));
      worst = std::max(worst, dev / tol);
      ok = ok && dev <= tol;
    }
  return {ok, "9 cases (d in {1, 2, 5}, alpha in {0.5, 0.1, 0.05}, K = 1e5): max |fraction - (1 - alpha)| = " +
                  fmt("%.2f", worst) + " x tolerance"};
}

std::pair<int, int> variance_identity(const TwoModuleSystem& sys, std::size_t S, std::uint64_t seed,
                                      double& worst, double& mean_z2) {
  McmcConfig cfg;
  cfg.seed = seed;
  const SampleSet s = sample_cut(sys, S, CutStrategy{}, cfg);
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  const auto t = propagation_table(sys, s.draws.leftCols(dp));
  const auto tv = total_variance_decomposition(t);
  int ok = 0, n = 0;
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(sys.d_eta()); ++k) {
    const Vector x = s.draws.col(dp + k);
    const Vector c = x.array() - x.mean();
    const double Sd = static_cast<double>(S);
    const double var = c.squaredNorm() / (Sd - 1.0);
    const double m4 = c.array().pow(4).mean();
    const double se = std::sqrt(std::max(m4 - var * var, 0.0) / Sd);
    const double z = std::abs(tv.total()[k] - var) / se;
    worst = std::max(worst, z);
    mean_z2 += z * z;
    ok += z <= 3.0;
    ++n;
  }
  mean_z2 /= n;
  return {ok, n};
}

// Law of total variance against the empirical variance of cut draws.
Outcome criterion8() {
  // 101 RE components each held to 3 SE: an exact identity still misses
  // somewhere about a quarter of the time, so mean z^2 (near 1) is shown too.
  double w_hpv = 0.0, w_re = 0.0, z2_hpv = 0.0, z2_re = 0.0;
  const auto [h_ok, h_n] =
      variance_identity(models::hpv_system(models::hpv_simulate(0)), 20000, 8, w_hpv, z2_hpv);
  const auto re = models::re_simulate(100, 10, 1.0, {0.5}, {{0, 10.0}}, 2024);
  const auto [r_ok, r_n] = variance_identity(models::re_system(re), 5000, 10, w_re, z2_re);
  return {h_ok == h_n && r_ok == r_n,
          "hpv " + std::to_string(h_ok) + "/" + std::to_string(h_n) + " eta within 3 SE (max " +
              fmt("%.2f", w_hpv) + " SE), re " + std::to_string(r_ok) + "/" + std::to_string(r_n) +
              " within 3 SE (max " + fmt("%.2f", w_re) + " SE, mean z^2 " + fmt("%.2f", z2_re) + ")"};
}

// Module-two loss cannot change the cut phi draws.
Outcome criterion9() {
  const auto d = models::hpv_simulate(0);
  const auto pois = models::hpv_system(d, models::HpvLoss::poisson());
  const auto quasi = models::hpv_system(d, models::HpvLoss::quasi(75.0));
  bool ok = true;
  std::string which;
  for (auto v : {CutVariant::conditional_normal, CutVariant::sir_t_proposal, CutVariant::nested_mcmc}) {
    CutStrategy st;
    st.variant = v;
    st.sir_proposals = 200;
    McmcConfig cfg;
    cfg.seed = 9;
    const SampleSet a = sample_cut(pois, 300, st, cfg);
    const SampleSet b = sample_cut(quasi, 300, st, cfg);
    const bool same = (a.draws.leftCols(13).array() == b.draws.leftCols(13).array()).all();
    const bool differ = !(a.draws.rightCols(2).array() == b.draws.rightCols(2).array()).all();
    ok = ok && same && differ;
    which += std::string(to_string(v)) + (same ? " identical" : " DIFFERENT") + "; ";
  }
  return {ok, "phi draws poisson vs quasi(75): " + which + "eta draws differ as expected"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, criterion9};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d: %s  %s  [%.1f s]\n", n, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
