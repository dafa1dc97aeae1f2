#pragma once

// How uncertainty in phi propagates into eta: per-draw conditional moments,
// the laws of total variance and total cumulance, Monte Carlo credible-set
// checks, ellipse export, and 1-D Wasserstein distances.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "cutpost/core.hpp"
#include "cutpost/laplace.hpp"
#include "cutpost/parallel.hpp"
#include "cutpost/samplers.hpp"

namespace cutpost {

/// One row per successful phi draw.
struct PropagationTable {
  Matrix phi;         // S x d_phi
  Matrix mu;          // S x d_eta, E(eta | phi_s)
  Matrix sigma_diag;  // S x d_eta, Var(eta_j | phi_s)
  Vector logdet;      // log det Cov(eta | phi_s)
  /// Row index of each entry in the input draws.
  std::vector<std::size_t> source_row;
  std::size_t failures = 0;

  Eigen::Index rows() const { return mu.rows(); }
};

struct PropagationOptions {
  /// Estimate conditional moments from nested chains instead of the normal
  /// approximation (slow; for cross-checking).
  bool nested_mcmc = false;
  std::size_t chain_steps = 4000;
  std::size_t chain_burn_in = 1000;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  double max_failure_fraction = 0.05;
};

inline PropagationTable propagation_table(const TwoModuleSystem& sys, const Matrix& phi_draws,
                                          const PropagationOptions& opt = {}) {
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  const auto de = static_cast<Eigen::Index>(sys.d_eta());
  if (phi_draws.cols() != dp) throw ConfigError("propagation table: phi draws have the wrong width");
  const auto S = static_cast<std::size_t>(phi_draws.rows());
  if (S == 0) throw ConfigError("propagation table: no phi draws");

  std::optional<Vector> warm;
  try {
    auto r = solve_conditional_mode(sys, Vector(phi_draws.colwise().mean().transpose()));
    if (r.converged) warm = r.eta_hat;
  } catch (const NumericError&) {
  }

  Matrix mu(static_cast<Eigen::Index>(S), de), var(static_cast<Eigen::Index>(S), de);
  Vector logdet(static_cast<Eigen::Index>(S));
  std::vector<char> ok(S, 0);
  parallel_for(S, opt.threads, [&](std::size_t s) {
    const auto r = static_cast<Eigen::Index>(s);
    const Vector phi = phi_draws.row(r).transpose();
    try {
      ConditionalNormal cn = conditional_laplace(sys, phi, warm);
      if (!opt.nested_mcmc) {
        mu.row(r) = cn.mean.transpose();
        var.row(r) = cn.covariance().diagonal().transpose();
        logdet[r] = -cn.log_det_precision();
      } else {
        McmcConfig c;
        c.steps = opt.chain_steps;
        c.burn_in = opt.chain_burn_in;
        c.adapt = false;
        c.proposal_cov = (2.38 * 2.38 / static_cast<double>(de)) * cn.covariance();
        Rng rng = make_rng(opt.seed, Stream::mcmc, s);
        auto res = run_rwm([&](const Vector& e) { return log_conditional_eta(sys, e, phi); },
                           cn.mean, c, rng);
        const Vector m = res.draws.colwise().mean().transpose();
        const Matrix cen = res.draws.rowwise() - m.transpose();
        const Matrix cov = cen.transpose() * cen / static_cast<double>(res.draws.rows() - 1);
        mu.row(r) = m.transpose();
        var.row(r) = cov.diagonal().transpose();
        Eigen::LLT<Matrix> llt(cov);
        logdet[r] = llt.info() == Eigen::Success
                        ? 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum()
                        : kNegInf;
      }
      ok[s] = (var.row(r).array() > 0.0).all();
    } catch (const NumericError&) {
    }
  });

  PropagationTable t;
  for (std::size_t s = 0; s < S; ++s) t.failures += !ok[s];
  if (static_cast<double>(t.failures) > opt.max_failure_fraction * static_cast<double>(S))
    throw NumericError("propagation table: conditional approximation failed at " +
                       std::to_string(t.failures) + " of " + std::to_string(S) + " phi draws");
  const auto n = static_cast<Eigen::Index>(S - t.failures);
  t.phi.resize(n, dp);
  t.mu.resize(n, de);
  t.sigma_diag.resize(n, de);
  t.logdet.resize(n);
  Eigen::Index k = 0;
  for (std::size_t s = 0; s < S; ++s) {
    if (!ok[s]) continue;
    const auto r = static_cast<Eigen::Index>(s);
    t.phi.row(k) = phi_draws.row(r);
    t.mu.row(k) = mu.row(r);
    t.sigma_diag.row(k) = var.row(r);
    t.logdet[k] = logdet[r];
    t.source_row.push_back(s);
    ++k;
  }
  return t;
}

struct TotalVariance {
  Vector E_var;     // mean_s Var(eta | phi_s)
  Vector Var_mean;  // sample variance of E(eta | phi_s), denominator S - 1
  Vector total() const { return E_var + Var_mean; }
};

inline TotalVariance total_variance_decomposition(const PropagationTable& t) {
  if (t.rows() < 2) throw ConfigError("total variance: need at least two rows");
  TotalVariance out;
  out.E_var = t.sigma_diag.colwise().mean().transpose();
  const Vector m = t.mu.colwise().mean().transpose();
  out.Var_mean =
      (t.mu.rowwise() - m.transpose()).array().square().colwise().sum().transpose() /
      static_cast<double>(t.rows() - 1);
  return out;
}

/// Terms two and three of the third-cumulant law; term one vanishes under a
/// normal conditional.
struct ThirdCumulant {
  Vector term2;  // mean_s (mu_s - mean mu)^3
  Vector term3;  // 3 Cov(mu_s, Sigma_s)
  Vector total() const { return term2 + term3; }
};

inline ThirdCumulant third_cumulant_decomposition(const PropagationTable& t) {
  if (t.rows() < 2) throw ConfigError("third cumulant: need at least two rows");
  const double S = static_cast<double>(t.rows());
  const Matrix cm = t.mu.rowwise() - t.mu.colwise().mean();
  const Matrix cs = t.sigma_diag.rowwise() - t.sigma_diag.colwise().mean();
  ThirdCumulant out;
  out.term2 = cm.array().cube().colwise().sum().transpose() / S;
  out.term3 = 3.0 * (cm.array() * cs.array()).colwise().sum().transpose() / (S - 1.0);
  return out;
}

inline double chi_squared_quantile(double dof, double p) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(dof), p);
}

/// Symmetric square root of a symmetric positive definite matrix.
inline Matrix spd_sqrt(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0)
    throw NumericError("matrix square root: input is not positive definite");
  return es.operatorSqrt();
}

struct CredibleSetResult {
  Matrix retained;  // whitened points inside the set
  double threshold = 0.0;
  std::size_t K = 0;
  double fraction() const { return K ? static_cast<double>(retained.rows()) / static_cast<double>(K) : 0.0; }
};

/// Draw Z_k ~ N(eta_hat, P^-1), whiten Y_k = P^{1/2}(Z_k - eta_hat) and keep
/// the points with |Y_k|^2 <= chi2_d(1 - alpha). At alpha = 1 nothing is kept.
inline CredibleSetResult credible_set_mc(const ConditionalNormal& cn, double alpha, std::size_t K,
                                         std::uint64_t seed) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("credible set: alpha must lie in [0, 1]");
  const auto d = cn.mean.size();
  CredibleSetResult out;
  out.K = K;
  out.threshold = alpha >= 1.0   ? 0.0
                  : alpha == 0.0 ? std::numeric_limits<double>::infinity()
                                 : chi_squared_quantile(static_cast<double>(d), 1.0 - alpha);
  const Matrix root = spd_sqrt(cn.precision);
  Rng rng = make_rng(seed, Stream::credible);
  std::vector<Vector> kept;
  for (std::size_t k = 0; k < K; ++k) {
    const Vector y = root * (cn.draw(rng) - cn.mean);
    if (out.threshold > 0.0 && y.squaredNorm() <= out.threshold) kept.push_back(y);
  }
  out.retained.resize(static_cast<Eigen::Index>(kept.size()), d);
  for (std::size_t k = 0; k < kept.size(); ++k) out.retained.row(static_cast<Eigen::Index>(k)) = kept[k].transpose();
  return out;
}

inline CredibleSetResult credible_set_mc(const TwoModuleSystem& sys, const Vector& phi,
                                         double alpha, std::size_t K, std::uint64_t seed) {
  return credible_set_mc(conditional_laplace(sys, phi), alpha, K, seed);
}

/// Boundary of the (1 - alpha) ellipse of a 2-D conditional normal as
/// `points` rows of (x, y).
inline Matrix ellipse_polyline(const ConditionalNormal& cn, double alpha, std::size_t points = 128) {
  if (cn.mean.size() != 2) throw ConfigError("ellipse export needs a two-dimensional eta");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("ellipse export: alpha must lie in (0, 1)");
  const double r = std::sqrt(chi_squared_quantile(2.0, 1.0 - alpha));
  Matrix out(static_cast<Eigen::Index>(points), 2);
  for (std::size_t k = 0; k < points; ++k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(points);
    Vector u(2);
    u << std::cos(a), std::sin(a);
    out.row(static_cast<Eigen::Index>(k)) = (cn.mean + r * (cn.cholesky() * u)).transpose();
  }
  return out;
}

/// Table rows whose logdet is closest to each requested empirical quantile.
inline std::vector<std::size_t> select_by_logdet_quantiles(const PropagationTable& t,
                                                           const std::vector<double>& q) {
  if (t.rows() == 0) throw ConfigError("logdet selection: empty table");
  std::vector<std::size_t> order(static_cast<std::size_t>(t.rows()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return t.logdet[static_cast<Eigen::Index>(a)] < t.logdet[static_cast<Eigen::Index>(b)];
  });
  std::vector<std::size_t> out;
  for (double p : q) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("logdet selection: quantiles must lie in [0, 1]");
    const auto pos = static_cast<std::size_t>(std::lround(p * static_cast<double>(order.size() - 1)));
    out.push_back(order[pos]);
  }
  return out;
}

/// Rows (s, x, y): ellipse polylines for the selected table rows, s being the
/// row index in the original draws.
inline Matrix ellipse_table(const TwoModuleSystem& sys, const PropagationTable& t,
                            const std::vector<std::size_t>& rows, double alpha,
                            std::size_t points = 128) {
  Matrix out(static_cast<Eigen::Index>(rows.size() * points), 3);
  Eigen::Index k = 0;
  for (auto r : rows) {
    const ConditionalNormal cn =
        conditional_laplace(sys, Vector(t.phi.row(static_cast<Eigen::Index>(r)).transpose()));
    const Matrix poly = ellipse_polyline(cn, alpha, points);
    for (Eigen::Index i = 0; i < poly.rows(); ++i, ++k) {
      out(k, 0) = static_cast<double>(t.source_row[r]);
      out(k, 1) = poly(i, 0);
      out(k, 2) = poly(i, 1);
    }
  }
  return out;
}

/// Wasserstein-1 distance between two empirical distributions on the line:
/// the integral of |F_a^-1(u) - F_b^-1(u)| over u, computed exactly on the
/// merged grid of quantile breakpoints.
inline double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ConfigError("wasserstein: both samples must be nonempty");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / na;
  }
  std::size_t i = 0, j = 0;
  double u = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double ua = static_cast<double>(i + 1) / na;
    const double ub = static_cast<double>(j + 1) / nb;
    const double next = std::min(ua, ub);
    total += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (ua <= next) ++i;
    if (ub <= next) ++j;
  }
  return total;
}

inline double wasserstein1_1d(const Vector& a, const Vector& b) {
  return wasserstein1_1d(std::vector<double>(a.data(), a.data() + a.size()),
                         std::vector<double>(b.data(), b.data() + b.size()));
}

}  // namespace cutpost
