#pragma once

// Two-module system: loss modules, priors and the three unnormalized log
// densities every sampler and approximation is built from.
//
//   full:        log pi(phi) + log pi(eta|phi) + nu L(phi) + nu' M(eta, phi)
//   cut marginal: log pi(phi) + nu L(phi)
//   conditional:  log pi(eta|phi) + nu' M(eta, phi)
//
// with L(phi) = -sum_i l(z_i, phi) and M(eta, phi) = -sum_i m(w_i, eta, phi).

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cutpost/error.hpp"
#include "cutpost/numdiff.hpp"
#include "cutpost/random.hpp"
#include "cutpost/types.hpp"

namespace cutpost {

/// Parameter block a loss or prior is differentiated with respect to.
enum class Block { phi, eta };

using ObsLoss = std::function<double(std::size_t i, const Vector& eta, const Vector& phi)>;
using ObsGrad = std::function<Vector(std::size_t i, const Vector& eta, const Vector& phi)>;
using ObsHess = std::function<Matrix(std::size_t i, const Vector& eta, const Vector& phi)>;
using SumLoss = std::function<double(const Vector& eta, const Vector& phi)>;
using SumGrad = std::function<Vector(const Vector& eta, const Vector& phi)>;
using SumHess = std::function<Matrix(const Vector& eta, const Vector& phi)>;

/// Per-observation loss with optional analytic derivatives.
///
/// Module one losses read only `phi` (they receive an empty `eta`); module two
/// losses read both. `grad`/`hess` are taken with respect to `wrt`. The
/// `sum_*` members are optional batched fast paths that must agree with the
/// per-observation sums.
struct LossModule {
  Block wrt = Block::phi;
  std::size_t n_obs = 0;
  ObsLoss loss;
  ObsGrad grad;
  ObsHess hess;
  SumLoss sum_loss;
  SumGrad sum_grad;
  SumHess sum_hess;
};

/// Unnormalized log prior density with a support indicator.
struct LogPrior {
  Block wrt = Block::phi;
  std::function<double(const Vector& eta, const Vector& phi)> log_density;
  std::function<bool(const Vector& eta, const Vector& phi)> support;
  std::function<Vector(const Vector& eta, const Vector& phi)> grad;
  std::function<Matrix(const Vector& eta, const Vector& phi)> hess;
  /// Prior mean of eta given phi, when finite. Used as the default solver start.
  std::function<Vector(const Vector& phi)> mean;

  bool contains(const Vector& eta, const Vector& phi) const {
    return !support || support(eta, phi);
  }

  /// -infinity outside the support.
  double operator()(const Vector& eta, const Vector& phi) const {
    if (!contains(eta, phi)) return kNegInf;
    return log_density ? log_density(eta, phi) : 0.0;
  }
};

namespace detail {

inline const Vector& pick(Block b, const Vector& eta, const Vector& phi) {
  return b == Block::phi ? phi : eta;
}

// Evaluate `fn(eta, phi)` with the `b` block replaced by `x`.
template <class Fn>
auto with_block(Block b, const Vector& eta, const Vector& phi, Fn&& fn) {
  return [b, &eta, &phi, fn = std::forward<Fn>(fn)](const Vector& x) {
    return b == Block::phi ? fn(eta, x) : fn(x, phi);
  };
}

inline double checked(double v, const char* what) {
  if (!std::isfinite(v))
    throw NumericError(std::string("pathological loss evaluation: ") + what +
                       " returned a non-finite value");
  return v;
}

}  // namespace detail

/// sum_i loss(i); throws `NumericError` on a non-finite result.
inline double module_loss(const LossModule& m, const Vector& eta, const Vector& phi) {
  if (m.sum_loss) return detail::checked(m.sum_loss(eta, phi), "loss");
  double total = 0.0;
  for (std::size_t i = 0; i < m.n_obs; ++i) total += m.loss(i, eta, phi);
  return detail::checked(total, "loss");
}

/// Gradient of a single observation's loss with respect to `m.wrt`.
inline Vector module_obs_gradient(const LossModule& m, std::size_t i, const Vector& eta,
                                  const Vector& phi) {
  if (m.grad) return m.grad(i, eta, phi);
  auto f = detail::with_block(m.wrt, eta, phi,
                              [&m, i](const Vector& e, const Vector& p) { return m.loss(i, e, p); });
  return numdiff::gradient(f, detail::pick(m.wrt, eta, phi));
}

/// Gradient of the summed loss with respect to `m.wrt`.
inline Vector module_gradient(const LossModule& m, const Vector& eta, const Vector& phi) {
  if (m.sum_grad) return m.sum_grad(eta, phi);
  const Vector& x = detail::pick(m.wrt, eta, phi);
  if (m.grad) {
    Vector g = Vector::Zero(x.size());
    for (std::size_t i = 0; i < m.n_obs; ++i) g += m.grad(i, eta, phi);
    return g;
  }
  auto f = detail::with_block(m.wrt, eta, phi, [&m](const Vector& e, const Vector& p) {
    return module_loss(m, e, p);
  });
  return numdiff::gradient(f, x);
}

/// Hessian of the summed loss with respect to `m.wrt`. Analytic when
/// supplied, otherwise differences of the gradient (or of values when no
/// gradient exists). Always symmetric.
inline Matrix module_hessian(const LossModule& m, const Vector& eta, const Vector& phi) {
  const Vector& x = detail::pick(m.wrt, eta, phi);
  Matrix h;
  if (m.sum_hess) {
    h = m.sum_hess(eta, phi);
  } else if (m.hess) {
    h = Matrix::Zero(x.size(), x.size());
    for (std::size_t i = 0; i < m.n_obs; ++i) h += m.hess(i, eta, phi);
  } else if (m.grad || m.sum_grad) {
    auto g = detail::with_block(m.wrt, eta, phi, [&m](const Vector& e, const Vector& p) {
      return module_gradient(m, e, p);
    });
    h = numdiff::hessian_from_gradient(g, x);
  } else {
    auto f = detail::with_block(m.wrt, eta, phi, [&m](const Vector& e, const Vector& p) {
      return module_loss(m, e, p);
    });
    h = numdiff::hessian(f, x);
  }
  if (!h.allFinite()) throw NumericError("loss Hessian has non-finite entries");
  return 0.5 * (h + h.transpose());
}

/// d^2 (sum loss) / d eta d phi^T for a module-two loss (d_eta x d_phi),
/// by differencing the eta-gradient in phi.
inline Matrix module_cross_hessian(const LossModule& m, const Vector& eta, const Vector& phi) {
  if (m.wrt != Block::eta) throw ConfigError("cross Hessian requires a module-two loss");
  auto g = [&](const Vector& p) { return module_gradient(m, eta, p); };
  Matrix c = numdiff::jacobian(g, phi, eta.size());
  if (!c.allFinite()) throw NumericError("cross Hessian has non-finite entries");
  return c;
}

inline Vector prior_gradient(const LogPrior& p, const Vector& eta, const Vector& phi) {
  if (p.grad) return p.grad(eta, phi);
  auto f = detail::with_block(p.wrt, eta, phi,
                              [&p](const Vector& e, const Vector& q) { return p(e, q); });
  return numdiff::gradient(f, detail::pick(p.wrt, eta, phi));
}

inline Matrix prior_hessian(const LogPrior& p, const Vector& eta, const Vector& phi) {
  if (p.hess) return p.hess(eta, phi);
  const Vector& x = detail::pick(p.wrt, eta, phi);
  if (!p.log_density) return Matrix::Zero(x.size(), x.size());
  Matrix h;
  if (p.grad) {
    auto g = detail::with_block(p.wrt, eta, phi,
                                [&p](const Vector& e, const Vector& q) { return p.grad(e, q); });
    h = numdiff::hessian_from_gradient(g, x);
  } else {
    auto f = detail::with_block(p.wrt, eta, phi,
                                [&p](const Vector& e, const Vector& q) { return p(e, q); });
    h = numdiff::hessian(f, x);
  }
  return 0.5 * (h + h.transpose());
}

/// Loss module multiplied by a constant `c` (all derivatives scaled too).
inline LossModule scaled(LossModule m, double c) {
  if (m.loss) m.loss = [f = m.loss, c](std::size_t i, const Vector& e, const Vector& p) {
    return c * f(i, e, p);
  };
  if (m.sum_loss) m.sum_loss = [f = m.sum_loss, c](const Vector& e, const Vector& p) {
    return c * f(e, p);
  };
  if (m.grad) m.grad = [f = m.grad, c](std::size_t i, const Vector& e, const Vector& p) {
    return Vector(c * f(i, e, p));
  };
  if (m.hess) m.hess = [f = m.hess, c](std::size_t i, const Vector& e, const Vector& p) {
    return Matrix(c * f(i, e, p));
  };
  if (m.sum_grad) m.sum_grad = [f = m.sum_grad, c](const Vector& e, const Vector& p) {
    return Vector(c * f(e, p));
  };
  if (m.sum_hess) m.sum_hess = [f = m.sum_hess, c](const Vector& e, const Vector& p) {
    return Matrix(c * f(e, p));
  };
  return m;
}

/// Loss that is identically zero for `n_obs` observations.
inline LossModule zero_loss(Block wrt, std::size_t n_obs, Eigen::Index dim) {
  LossModule m;
  m.wrt = wrt;
  m.n_obs = n_obs;
  m.loss = [](std::size_t, const Vector&, const Vector&) { return 0.0; };
  m.grad = [dim](std::size_t, const Vector&, const Vector&) { return Vector(Vector::Zero(dim)); };
  m.hess = [dim](std::size_t, const Vector&, const Vector&) {
    return Matrix(Matrix::Zero(dim, dim));
  };
  return m;
}

/// Improper flat prior on the whole space.
inline LogPrior flat_prior(Block wrt, Eigen::Index dim) {
  LogPrior p;
  p.wrt = wrt;
  p.log_density = [](const Vector&, const Vector&) { return 0.0; };
  p.grad = [dim](const Vector&, const Vector&) { return Vector(Vector::Zero(dim)); };
  p.hess = [dim](const Vector&, const Vector&) { return Matrix(Matrix::Zero(dim, dim)); };
  return p;
}

/// Uniform density on the open box (lo, hi); log density 0 inside.
inline LogPrior box_prior(Block wrt, Vector lo, Vector hi) {
  LogPrior p = flat_prior(wrt, lo.size());
  p.support = [wrt, lo = std::move(lo), hi = std::move(hi)](const Vector& eta, const Vector& phi) {
    const Vector& x = detail::pick(wrt, eta, phi);
    return (x.array() > lo.array()).all() && (x.array() < hi.array()).all();
  };
  return p;
}

/// Independent normal prior N(mean, diag(sd^2)) on the `wrt` block.
inline LogPrior independent_normal_prior(Block wrt, Vector mean, Vector sd) {
  LogPrior p;
  p.wrt = wrt;
  const Vector prec = sd.array().square().inverse();
  const double log_norm =
      -0.5 * static_cast<double>(mean.size()) * std::log(2.0 * std::numbers::pi) -
      sd.array().log().sum();
  p.log_density = [wrt, mean, prec, log_norm](const Vector& eta, const Vector& phi) {
    const Vector& x = detail::pick(wrt, eta, phi);
    return log_norm - 0.5 * ((x - mean).array().square() * prec.array()).sum();
  };
  p.grad = [wrt, mean, prec](const Vector& eta, const Vector& phi) {
    const Vector& x = detail::pick(wrt, eta, phi);
    return Vector(-(x - mean).cwiseProduct(prec));
  };
  p.hess = [prec](const Vector&, const Vector&) { return Matrix((-prec).asDiagonal()); };
  p.mean = [mean](const Vector&) { return mean; };
  return p;
}

/// Where the conditional normal approximation of eta | w, phi is centred.
///
/// `loss_mode` uses argmax_eta M(eta|phi) with curvature of M only.
/// `posterior_mode` maximizes log pi(eta|phi) + nu' M(eta|phi) and uses its
/// full curvature; required when some eta coordinates enter only through the
/// prior.
enum class ConditionalCenter { loss_mode, posterior_mode };

/// Exact draw from pi_cut(phi | z) at module-one learning rate nu.
using PhiSampler = std::function<Vector(Rng&, double nu)>;

/// The central analysis object.
struct TwoModuleSystem {
  std::vector<std::string> phi_names;
  std::vector<std::string> eta_names;
  LossModule module1;   // l(z_i, phi)
  LossModule module2;   // m(w_i, eta, phi)
  LogPrior prior_phi;   // pi(phi)
  LogPrior prior_eta;   // pi(eta | phi)
  double nu = 1.0;
  double nu_prime = 1.0;
  ConditionalCenter center = ConditionalCenter::loss_mode;
  /// Optional direct sampler for pi_cut(phi | z) (conjugate module one).
  PhiSampler phi_sampler;
  /// Starting point for MCMC over phi; required when no direct sampler exists.
  Vector phi_init;
  /// Optional solver start for eta given phi.
  std::function<Vector(const Vector& phi)> eta_init;
  /// Further starts for non-convex module-two losses; the best converged mode wins.
  std::function<std::vector<Vector>(const Vector& phi)> eta_alt_starts;
  /// Optional model-specific sampler for the full posterior, used by
  /// sample_full instead of the joint random walk. It receives the system (for
  /// the current learning rates), S, burn-in and thinning in sweeps, and the
  /// seed, and returns S x (d_phi + d_eta) draws. Clear it after replacing a
  /// module or prior.
  std::function<Matrix(const TwoModuleSystem&, std::size_t S, std::size_t burn_in, std::size_t thin,
                       std::uint64_t seed)>
      full_sampler;
  std::string label;

  std::size_t d_phi() const { return phi_names.size(); }
  std::size_t d_eta() const { return eta_names.size(); }
  std::size_t n1() const { return module1.n_obs; }
  std::size_t n2() const { return module2.n_obs; }

  std::vector<std::string> names() const {
    std::vector<std::string> all = phi_names;
    all.insert(all.end(), eta_names.begin(), eta_names.end());
    return all;
  }

  void validate() const {
    if (phi_names.empty() || eta_names.empty())
      throw ConfigError("TwoModuleSystem: d_phi and d_eta must be positive");
    if (module1.wrt != Block::phi || module2.wrt != Block::eta)
      throw ConfigError("TwoModuleSystem: module one must act on phi, module two on eta");
    if (!module1.loss && !module1.sum_loss) throw ConfigError("TwoModuleSystem: module one has no loss");
    if (!module2.loss && !module2.sum_loss) throw ConfigError("TwoModuleSystem: module two has no loss");
    if (module1.n_obs == 0 || module2.n_obs == 0)
      throw ConfigError("TwoModuleSystem: each module needs at least one observation");
    if (!(std::isfinite(nu) && nu >= 0.0) || !(std::isfinite(nu_prime) && nu_prime >= 0.0))
      throw ConfigError("TwoModuleSystem: learning rates must be finite and >= 0");
    if (phi_init.size() != 0 && static_cast<std::size_t>(phi_init.size()) != d_phi())
      throw ConfigError("TwoModuleSystem: phi_init has the wrong dimension");
  }

  Vector draw_phi(Rng& rng) const { return phi_sampler(rng, nu); }

  /// Solver start for eta at phi: explicit init, else finite prior mean, else 0.
  Vector default_eta(const Vector& phi) const {
    if (eta_init) return eta_init(phi);
    if (prior_eta.mean) {
      Vector m = prior_eta.mean(phi);
      if (m.allFinite()) return m;
    }
    return Vector::Zero(static_cast<Eigen::Index>(d_eta()));
  }
};

/// log pi(phi) + nu L(phi). Never touches module two.
inline double log_cut_marginal_phi(const TwoModuleSystem& sys, const Vector& phi) {
  static const Vector empty;
  const double lp = sys.prior_phi(empty, phi);
  if (lp == kNegInf) return kNegInf;
  if (sys.nu == 0.0) return lp;
  return lp - sys.nu * module_loss(sys.module1, empty, phi);
}

/// log pi(eta|phi) + nu' M(eta, phi); kernel of pi(eta | w, phi) without its
/// normalizer m_eta(w|phi).
inline double log_conditional_eta(const TwoModuleSystem& sys, const Vector& eta,
                                  const Vector& phi) {
  const double lp = sys.prior_eta(eta, phi);
  if (lp == kNegInf) return kNegInf;
  if (sys.nu_prime == 0.0) return lp;
  return lp - sys.nu_prime * module_loss(sys.module2, eta, phi);
}

inline double log_generalized_posterior(const TwoModuleSystem& sys, const Vector& phi,
                                        const Vector& eta) {
  const double cut = log_cut_marginal_phi(sys, phi);
  if (cut == kNegInf) return kNegInf;
  const double cond = log_conditional_eta(sys, eta, phi);
  if (cond == kNegInf) return kNegInf;
  return cut + cond;
}

/// theta = (phi^T, eta^T)^T.
inline double log_generalized_posterior(const TwoModuleSystem& sys, const Vector& theta) {
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  const auto de = static_cast<Eigen::Index>(sys.d_eta());
  if (theta.size() != dp + de) throw ConfigError("theta has the wrong dimension");
  return log_generalized_posterior(sys, theta.head(dp).eval(), theta.tail(de).eval());
}

}  // namespace cutpost
