#pragma once

// Normal approximations: the conditional eta | w, phi, the cut marginal of
// phi, and the joint (phi, eta) approximation assembled from Sigma blocks.

#include <optional>
#include <sstream>

#include "cutpost/core.hpp"
#include "cutpost/optimize.hpp"
#include "cutpost/random.hpp"

namespace cutpost {

namespace detail {

inline Matrix cholesky_lower(const Matrix& a, const char* what) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success)
    throw NumericError(std::string(what) + " is not positive definite");
  return llt.matrixL();
}

inline Matrix spd_inverse(const Matrix& a, const char* what) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) throw NumericError(std::string(what) + " is singular or not positive definite");
  Matrix inv = llt.solve(Matrix::Identity(a.rows(), a.cols()));
  return 0.5 * (inv + inv.transpose());
}

}  // namespace detail

/// N(mean, covariance) with a cached lower Cholesky factor of the covariance.
struct Gaussian {
  Vector mean;
  Matrix covariance;
  Matrix chol;

  Gaussian() = default;
  Gaussian(Vector m, Matrix cov) : mean(std::move(m)), covariance(std::move(cov)) {
    covariance = 0.5 * (covariance + covariance.transpose());
    chol = detail::cholesky_lower(covariance, "covariance");
  }

  Vector draw(Rng& rng) const { return mvn_draw(rng, mean, chol); }
  double log_density(const Vector& x) const { return mvn_log_density(x, mean, chol); }
};

/// Normal approximation to pi(eta | w, phi): mean eta_hat(phi) and precision
/// n2 nu' J(eta_hat | phi).
struct ConditionalNormal {
  Vector phi;
  Vector mean;
  Matrix precision;
  Matrix J;
  InnerSolveResult solve;

  ConditionalNormal() = default;
  ConditionalNormal(Vector phi_, InnerSolveResult res, double n2, double nu_prime)
      : phi(std::move(phi_)), mean(res.eta_hat), J(res.J), solve(std::move(res)) {
    precision = n2 * nu_prime * J;
    precision = 0.5 * (precision + precision.transpose());
    Eigen::LLT<Matrix> llt(precision);
    if (llt.info() != Eigen::Success) throw NumericError("conditional precision is not positive definite");
    prec_chol_ = llt.matrixL();
    covariance_ = detail::spd_inverse(precision, "conditional precision");
    cov_chol_ = detail::cholesky_lower(covariance_, "conditional covariance");
  }

  const Matrix& covariance() const { return covariance_; }
  /// Lower Cholesky factor of the covariance.
  const Matrix& cholesky() const { return cov_chol_; }
  /// Lower Cholesky factor of the precision.
  const Matrix& precision_cholesky() const { return prec_chol_; }

  double log_det_precision() const { return 2.0 * prec_chol_.diagonal().array().log().sum(); }

  Vector draw(Rng& rng) const { return mvn_draw(rng, mean, cov_chol_); }

  double log_density(const Vector& eta) const {
    // Evaluate through the precision factor: u = L_P^T (eta - mean).
    const auto d = static_cast<double>(mean.size());
    const Vector u = prec_chol_.transpose() * (eta - mean);
    return -0.5 * d * std::log(2.0 * std::numbers::pi) + 0.5 * log_det_precision() -
           0.5 * u.squaredNorm();
  }

 private:
  Matrix covariance_;
  Matrix cov_chol_;
  Matrix prec_chol_;
};

/// Conditional normal approximation at phi. Throws `NumericError` when the
/// inner solve does not converge.
inline ConditionalNormal conditional_laplace(const TwoModuleSystem& sys, const Vector& phi,
                                             const std::optional<Vector>& init = std::nullopt) {
  detail::require_positive_nu_prime(sys);
  InnerSolveResult res = solve_conditional_mode(sys, phi, init);
  if (!res.converged) throw NumericError("inner solve failed: " + res.message);
  return ConditionalNormal(phi, std::move(res), static_cast<double>(sys.n2()), sys.nu_prime);
}

/// Normal approximation to pi_cut(phi | z): N(phi_hat, [n1 nu Sigma11]^-1)
/// with phi_hat = argmax L and Sigma11 = -(1/n1) Hessian of L at phi_hat.
inline Gaussian marginal_laplace_phi(const TwoModuleSystem& sys,
                                     const std::optional<Vector>& init = std::nullopt) {
  if (!(sys.nu > 0.0)) throw ConfigError("marginal Laplace approximation requires nu > 0");
  auto res = solve_phi_mode(sys, init);
  if (!res.converged) throw NumericError("phi mode search failed: " + res.message);
  static const Vector empty;
  const Matrix h = module_hessian(sys.module1, empty, res.x);
  return Gaussian(res.x, detail::spd_inverse(sys.nu * h, "module-one curvature"));
}

/// Joint normal approximation of the cut posterior of (phi, eta).
///
/// `V` lives on the local scale (sqrt(n1)(phi - phi_hat), sqrt(n2)(eta - eta_hat));
/// `covariance` is D^-1/2 V D^-1/2 on the raw scale with D = diag(n1 I, n2 I).
/// The Sigma blocks are negative Hessians per observation, learning rates
/// included.
struct JointNormal {
  Vector mean;
  Matrix covariance;
  Matrix V;
  Matrix Sigma11;
  Matrix Sigma12;
  Matrix Sigma22;
  double vartheta = 1.0;
  std::size_t d_phi = 0;
  std::size_t d_eta = 0;

  Eigen::Index dp() const { return static_cast<Eigen::Index>(d_phi); }
  Eigen::Index de() const { return static_cast<Eigen::Index>(d_eta); }

  Gaussian phi_marginal() const {
    return Gaussian(mean.head(dp()), covariance.topLeftCorner(dp(), dp()));
  }

  /// Covariance of eta given phi implied by the joint normal; does not depend
  /// on phi.
  Matrix conditional_covariance_eta() const {
    const Matrix cpp = covariance.topLeftCorner(dp(), dp());
    const Matrix cep = covariance.bottomLeftCorner(de(), dp());
    const Matrix cee = covariance.bottomRightCorner(de(), de());
    Matrix s = cee - cep * cpp.llt().solve(cep.transpose());
    return 0.5 * (s + s.transpose());
  }

  Vector conditional_mean_eta(const Vector& phi) const {
    const Matrix cpp = covariance.topLeftCorner(dp(), dp());
    const Matrix cep = covariance.bottomLeftCorner(de(), dp());
    return mean.tail(de()) + cep * cpp.llt().solve(phi - mean.head(dp()));
  }
};

/// Assemble V from the blocks:
///   V11 = S11^-1, V12 = -t S11^-1 S12 S22^-1,
///   V22 = S22^-1 + t^2 S22^-1 S21 S11^-1 S12 S22^-1
/// and map back to the raw scale.
inline JointNormal joint_normal_from_blocks(Vector mean, const Matrix& s11, const Matrix& s12,
                                            const Matrix& s22, double vartheta, double n1,
                                            double n2) {
  const Eigen::Index dp = s11.rows();
  const Eigen::Index de = s22.rows();
  if (s11.cols() != dp || s22.cols() != de || s12.rows() != dp || s12.cols() != de ||
      mean.size() != dp + de)
    throw ConfigError("joint normal: block dimensions do not match");
  if (!(n1 > 0.0 && n2 > 0.0 && vartheta > 0.0 && std::isfinite(vartheta)))
    throw ConfigError("joint normal: sample sizes and vartheta must be positive");

  const Matrix s11i = detail::spd_inverse(s11, "Sigma11");
  const Matrix s22i = detail::spd_inverse(s22, "Sigma22");
  JointNormal j;
  j.mean = std::move(mean);
  j.Sigma11 = s11;
  j.Sigma12 = s12;
  j.Sigma22 = s22;
  j.vartheta = vartheta;
  j.d_phi = static_cast<std::size_t>(dp);
  j.d_eta = static_cast<std::size_t>(de);
  j.V.resize(dp + de, dp + de);
  const Matrix v12 = -vartheta * s11i * s12 * s22i;
  j.V.topLeftCorner(dp, dp) = s11i;
  j.V.topRightCorner(dp, de) = v12;
  j.V.bottomLeftCorner(de, dp) = v12.transpose();
  j.V.bottomRightCorner(de, de) =
      s22i + vartheta * vartheta * s22i * s12.transpose() * s11i * s12 * s22i;
  j.V = 0.5 * (j.V + j.V.transpose());

  Vector dinv(dp + de);
  dinv.head(dp).setConstant(1.0 / std::sqrt(n1));
  dinv.tail(de).setConstant(1.0 / std::sqrt(n2));
  j.covariance = dinv.asDiagonal() * j.V * dinv.asDiagonal();
  j.covariance = 0.5 * (j.covariance + j.covariance.transpose());
  return j;
}

/// Joint Laplace approximation at (phi_hat, eta_hat(phi_hat)). `zeta`
/// defaults to n1 / n2; vartheta = zeta^-1/2.
inline JointNormal joint_laplace(const TwoModuleSystem& sys,
                                 std::optional<double> zeta = std::nullopt) {
  const double n1 = static_cast<double>(sys.n1());
  const double n2 = static_cast<double>(sys.n2());
  const double z = zeta.value_or(n1 / n2);
  if (!(z > 0.0 && std::isfinite(z))) throw ConfigError("zeta must lie in (0, inf)");
  if (!(sys.nu > 0.0)) throw ConfigError("joint Laplace approximation requires nu > 0");
  detail::require_positive_nu_prime(sys);

  auto phi_res = solve_phi_mode(sys);
  if (!phi_res.converged) throw NumericError("phi mode search failed: " + phi_res.message);
  const Vector& phi_hat = phi_res.x;
  auto eta_res = solve_conditional_mode(sys, phi_hat);
  if (!eta_res.converged) throw NumericError("inner solve failed: " + eta_res.message);
  const Vector& eta_hat = eta_res.eta_hat;

  static const Vector empty;
  const Matrix s11 = sys.nu * module_hessian(sys.module1, empty, phi_hat) / n1;
  const Matrix s22 = sys.nu_prime * eta_res.J;
  // d_eta x d_phi cross curvature of the centring objective, negated.
  Matrix s21 = sys.nu_prime * module_cross_hessian(sys.module2, eta_hat, phi_hat);
  if (sys.center == ConditionalCenter::posterior_mode) {
    auto g = [&](const Vector& p) { return prior_gradient(sys.prior_eta, eta_hat, p); };
    s21 -= numdiff::jacobian(g, phi_hat, eta_hat.size());
  }
  s21 /= n2;

  Vector mean(phi_hat.size() + eta_hat.size());
  mean << phi_hat, eta_hat;
  return joint_normal_from_blocks(std::move(mean), s11, s21.transpose(), s22, 1.0 / std::sqrt(z),
                                  n1, n2);
}

}  // namespace cutpost
