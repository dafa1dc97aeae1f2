#pragma once

// Newton maximizer with Armijo backtracking and the inner solve
// eta_hat(phi) = argmax_eta M(eta | phi) with its curvature J.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>

#include <Eigen/Eigenvalues>

#include "cutpost/core.hpp"

namespace cutpost {

struct NewtonOptions {
  std::size_t max_iterations = 200;
  /// Convergence when ||grad|| / scale <= grad_tol.
  double grad_tol = 1e-8;
  double scale = 1.0;
  double armijo_c = 1e-4;
  std::size_t max_backtracks = 60;
};

struct MaximizeResult {
  Vector x;
  double value = kNegInf;
  Vector grad;
  Matrix hessian;
  bool converged = false;
  std::size_t iterations = 0;
  double grad_norm = std::numeric_limits<double>::infinity();
  std::string message;
};

/// Maximize `f` from `x0` using Newton steps when -H is positive definite, a
/// spectrum-shifted Newton step when it is not, and plain gradient ascent
/// when neither gives an ascent direction. `f` may return -infinity outside its
/// domain; such trial points are backtracked away from.
template <class F, class G, class H>
MaximizeResult newton_maximize(F&& f, G&& grad, H&& hess, Vector x0, const NewtonOptions& opt = {}) {
  MaximizeResult r;
  r.x = std::move(x0);
  r.value = f(r.x);
  if (!std::isfinite(r.value)) {
    r.message = "objective is not finite at the starting point";
    return r;
  }
  double ascent_step = 1.0;
  for (r.iterations = 0; r.iterations <= opt.max_iterations; ++r.iterations) {
    r.grad = grad(r.x);
    r.grad_norm = r.grad.norm();
    if (!std::isfinite(r.grad_norm)) {
      r.message = "gradient is not finite";
      return r;
    }
    if (r.grad_norm / opt.scale <= opt.grad_tol) {
      r.hessian = hess(r.x);
      r.converged = true;
      return r;
    }
    if (r.iterations == opt.max_iterations) break;

    r.hessian = hess(r.x);
    Vector dir;
    double t = 1.0;
    bool newton = false, plain_gradient = false;
    if (r.hessian.allFinite()) {
      Eigen::LLT<Matrix> llt(-r.hessian);
      if (llt.info() == Eigen::Success) {
        dir = llt.solve(r.grad);
        newton = true;
      } else {
        // Shift the spectrum of -H until it is positive definite; large
        // shifts turn this into a scaled gradient step.
        Eigen::SelfAdjointEigenSolver<Matrix> es(-r.hessian, Eigen::EigenvaluesOnly);
        const auto& ev = es.eigenvalues();
        const double tau = 2.0 * std::abs(ev.minCoeff()) + 1e-8 * std::max(1.0, ev.cwiseAbs().maxCoeff());
        Eigen::LLT<Matrix> shifted(-r.hessian + tau * Matrix::Identity(r.x.size(), r.x.size()));
        if (shifted.info() == Eigen::Success) dir = shifted.solve(r.grad);
      }
    }
    if (dir.size() == 0 || !dir.allFinite() || r.grad.dot(dir) <= 0.0) {
      dir = r.grad / r.grad_norm;
      t = ascent_step;
      plain_gradient = true;
    }
    const double slope = r.grad.dot(dir);

    bool accepted = false;
    for (std::size_t k = 0; k < opt.max_backtracks; ++k, t *= 0.5) {
      const Vector trial = r.x + t * dir;
      double ft;
      try {
        ft = f(trial);
      } catch (const NumericError&) {
        continue;
      }
      if (!std::isfinite(ft)) continue;
      bool ok = ft >= r.value + opt.armijo_c * t * slope;
      // Near the optimum a full Newton step can be below the resolution of f;
      // accept it when it reduces the gradient instead.
      if (!ok && newton && k == 0 && ft >= r.value - 1e-12 * std::max(1.0, std::abs(r.value)))
        ok = grad(trial).norm() < r.grad_norm;
      if (ok) {
        r.x = trial;
        r.value = ft;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      r.message = "line search failed to find an ascent step";
      return r;
    }
    if (plain_gradient) ascent_step = std::min(2.0 * t, 1e6);
  }
  std::ostringstream os;
  os << "no convergence after " << opt.max_iterations << " iterations (|grad|/scale = "
     << r.grad_norm / opt.scale << ")";
  r.message = os.str();
  return r;
}

/// Result of the inner solve at a fixed phi.
struct InnerSolveResult {
  Vector eta_hat;
  /// Per-observation curvature, positive definite when `converged`.
  Matrix J;
  bool converged = false;
  std::size_t iterations = 0;
  double grad_norm = 0.0;
  /// Jitter (relative to mean(diag J)) that was added to reach positive
  /// definiteness; 0 when none was needed.
  double jitter = 0.0;
  std::string message;
};

namespace detail {

struct CenterObjective {
  const TwoModuleSystem& sys;
  const Vector& phi;

  double value(const Vector& eta) const {
    if (sys.center == ConditionalCenter::loss_mode) return -module_loss(sys.module2, eta, phi);
    return log_conditional_eta(sys, eta, phi);
  }
  Vector gradient(const Vector& eta) const {
    if (sys.center == ConditionalCenter::loss_mode) return -module_gradient(sys.module2, eta, phi);
    return prior_gradient(sys.prior_eta, eta, phi) -
           sys.nu_prime * module_gradient(sys.module2, eta, phi);
  }
  Matrix hessian(const Vector& eta) const {
    if (sys.center == ConditionalCenter::loss_mode) return -module_hessian(sys.module2, eta, phi);
    return prior_hessian(sys.prior_eta, eta, phi) -
           sys.nu_prime * module_hessian(sys.module2, eta, phi);
  }
};

inline void require_positive_nu_prime(const TwoModuleSystem& sys) {
  if (!(sys.nu_prime > 0.0))
    throw ConfigError("conditional approximation requires a strictly positive nu'");
}

}  // namespace detail

/// Curvature of the centring objective at (eta, phi), on the loss scale:
/// sum_i d^2 m_i / d eta^2 in loss mode; -(d^2/d eta^2)[log pi(eta|phi) + nu' M] / nu'
/// in posterior mode. At the mode, dividing by n2 gives J.
inline Matrix hessian_eta(const TwoModuleSystem& sys, const Vector& eta, const Vector& phi) {
  detail::CenterObjective obj{sys, phi};
  Matrix h = -obj.hessian(eta);
  if (sys.center == ConditionalCenter::posterior_mode) {
    detail::require_positive_nu_prime(sys);
    h /= sys.nu_prime;
  }
  if (!h.allFinite()) throw NumericError("eta Hessian has non-finite entries");
  return 0.5 * (h + h.transpose());
}

/// Turn a symmetric curvature matrix into a positive definite one, adding
/// jitter 1e-8 * mean(diag), x10 up to 1e-2, if needed. Throws naming the
/// smallest eigenvalue when that is not enough.
inline Matrix make_positive_definite(const Matrix& j, double* jitter_used = nullptr) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(j, Eigen::EigenvaluesOnly);
  const double min_eig = es.eigenvalues().minCoeff();
  if (jitter_used) *jitter_used = 0.0;
  if (min_eig > 0.0) return j;
  const double mean_diag = std::max(j.diagonal().mean(), std::numeric_limits<double>::min());
  const auto n = j.rows();
  for (double rel = 1e-8; rel <= 1e-2 * (1 + 1e-12); rel *= 10.0) {
    const Matrix jj = j + rel * mean_diag * Matrix::Identity(n, n);
    if (Eigen::LLT<Matrix>(jj).info() == Eigen::Success &&
        Eigen::SelfAdjointEigenSolver<Matrix>(jj, Eigen::EigenvaluesOnly).eigenvalues().minCoeff() >
            0.0) {
      if (jitter_used) *jitter_used = rel;
      return jj;
    }
  }
  std::ostringstream os;
  os << "curvature matrix is not positive definite: smallest eigenvalue " << min_eig;
  throw NumericError(os.str());
}

/// eta_hat(phi) and J(eta_hat | phi). Never throws for non-convergence: the
/// result carries converged = false. Throws `NumericError` when the Hessian at
/// a converged point is indefinite beyond what jitter repairs.
inline InnerSolveResult solve_conditional_mode(const TwoModuleSystem& sys, const Vector& phi,
                                               const std::optional<Vector>& init = std::nullopt,
                                               NewtonOptions opt = {}) {
  if (sys.center == ConditionalCenter::posterior_mode) detail::require_positive_nu_prime(sys);
  detail::CenterObjective obj{sys, phi};
  const double n2 = static_cast<double>(sys.n2());
  opt.scale = sys.center == ConditionalCenter::loss_mode ? n2 : n2 * sys.nu_prime;

  std::vector<Vector> starts{init ? *init : sys.default_eta(phi)};
  if (!init && sys.eta_alt_starts)
    for (Vector& e : sys.eta_alt_starts(phi)) starts.push_back(std::move(e));

  MaximizeResult res;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    if (static_cast<std::size_t>(starts[k].size()) != sys.d_eta())
      throw ConfigError("eta start has the wrong dimension");
    auto r = newton_maximize([&](const Vector& e) { return obj.value(e); },
                             [&](const Vector& e) { return obj.gradient(e); },
                             [&](const Vector& e) { return obj.hessian(e); }, starts[k], opt);
    const bool better = r.converged && (!res.converged || r.value > res.value);
    if (k == 0 || better) res = std::move(r);
  }

  InnerSolveResult out;
  out.eta_hat = res.x;
  out.converged = res.converged;
  out.iterations = res.iterations;
  out.grad_norm = res.grad_norm / opt.scale;
  out.message = res.message;
  if (!res.converged) {
    if (res.hessian.size() != 0) out.J = -res.hessian / opt.scale;
    return out;
  }
  Matrix j = -res.hessian / opt.scale;
  j = 0.5 * (j + j.transpose());
  out.J = make_positive_definite(j, &out.jitter);
  return out;
}

/// phi_hat = argmax_phi L(phi) (loss only; prior support respected).
inline MaximizeResult solve_phi_mode(const TwoModuleSystem& sys,
                                     const std::optional<Vector>& init = std::nullopt,
                                     NewtonOptions opt = {}) {
  static const Vector empty;
  Vector start = init ? *init : sys.phi_init;
  if (start.size() == 0) start = Vector::Zero(static_cast<Eigen::Index>(sys.d_phi()));
  opt.scale = static_cast<double>(sys.n1());
  auto f = [&](const Vector& p) {
    if (!sys.prior_phi.contains(empty, p)) return kNegInf;
    return -module_loss(sys.module1, empty, p);
  };
  auto g = [&](const Vector& p) { return Vector(-module_gradient(sys.module1, empty, p)); };
  auto h = [&](const Vector& p) { return Matrix(-module_hessian(sys.module1, empty, p)); };
  return newton_maximize(f, g, h, start, opt);
}

}  // namespace cutpost
