#pragma once

// Random-walk Metropolis, sampling importance resampling, and the two-stage
// cut sampler: phi ~ pi_cut(phi | z), then eta ~ pi(eta | w, phi).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cutpost/core.hpp"
#include "cutpost/laplace.hpp"
#include "cutpost/optimize.hpp"
#include "cutpost/parallel.hpp"
#include "cutpost/random.hpp"
#include "cutpost/types.hpp"

namespace cutpost {

using LogTarget = std::function<double(const Vector&)>;

struct McmcConfig {
  std::size_t steps = 20000;
  std::size_t burn_in = 5000;
  std::size_t thin = 1;
  /// Per-coordinate proposal standard deviations; a single entry is broadcast.
  Vector proposal_scale = Vector::Constant(1, 0.1);
  /// Full proposal covariance; overrides `proposal_scale` when non-empty.
  Matrix proposal_cov;
  std::uint64_t seed = 0;
  /// Robbins-Monro scaling toward acceptance 0.234 during burn-in.
  bool adapt = true;
  /// Also replace the proposal covariance by the empirical burn-in covariance.
  bool adapt_covariance = false;

  std::size_t kept() const { return (steps - burn_in + thin - 1) / thin; }

  void validate(Eigen::Index dim) const {
    if (!(steps > burn_in)) throw ConfigError("mcmc: steps must exceed burn_in");
    if (thin < 1) throw ConfigError("mcmc: thin must be >= 1");
    if (proposal_cov.size() != 0) {
      if (proposal_cov.rows() != dim || proposal_cov.cols() != dim)
        throw ConfigError("mcmc: proposal_cov has the wrong dimension");
    } else {
      if (proposal_scale.size() != 1 && proposal_scale.size() != dim)
        throw ConfigError("mcmc: proposal_scale has the wrong dimension");
      if (!(proposal_scale.array() > 0.0).all() || !proposal_scale.allFinite())
        throw ConfigError("mcmc: proposal_scale must be positive");
    }
  }
};

struct ChainResult {
  Matrix draws;
  Vector last;
  double last_log_target = kNegInf;
  double acceptance = 0.0;
  double burn_in_acceptance = 0.0;
  double final_log_scale = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

inline constexpr double kTargetAcceptance = 0.234;

inline Matrix initial_proposal_chol(const McmcConfig& cfg, Eigen::Index d) {
  if (cfg.proposal_cov.size() != 0) return cholesky_lower(cfg.proposal_cov, "proposal covariance");
  Vector s = cfg.proposal_scale.size() == 1 ? Vector::Constant(d, cfg.proposal_scale[0])
                                            : cfg.proposal_scale;
  return s.asDiagonal();
}

}  // namespace detail

/// Metropolis chain with Gaussian random-walk proposals. Adaptation, if any,
/// stops at the end of burn-in; kept draws come from a fixed kernel.
inline ChainResult run_rwm(const LogTarget& log_target, const Vector& init, const McmcConfig& cfg,
                           Rng& rng) {
  const Eigen::Index d = init.size();
  cfg.validate(d);
  ChainResult out;
  Vector x = init;
  double lp = log_target(x);
  if (!std::isfinite(lp)) throw ConfigError("mcmc: log target is not finite at the initial point");

  Matrix chol = detail::initial_proposal_chol(cfg, d);
  double log_scale = 0.0;
  std::size_t accepted = 0, accepted_burn = 0;

  // Running moments for covariance adaptation, collected from a quarter of
  // the way into burn-in so the initial transient is excluded. The last
  // quarter adapts the scale only, so it settles against the final covariance.
  const std::size_t cov_start = cfg.burn_in / 4;
  const std::size_t cov_stop = cfg.burn_in - cfg.burn_in / 4;
  const std::size_t cov_every = std::max<std::size_t>(50, static_cast<std::size_t>(d));
  std::size_t cov_n = 0;
  Vector cov_mean = Vector::Zero(d);
  Matrix cov_m2 = Matrix::Zero(d, d);

  out.draws.resize(static_cast<Eigen::Index>(cfg.kept()), d);
  Eigen::Index row = 0;
  std::normal_distribution<double> normal;
  Vector z(d);

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    for (Eigen::Index k = 0; k < d; ++k) z[k] = normal(rng);
    const Vector y = x + std::exp(log_scale) * (chol * z);
    const double ly = log_target(y);
    const double log_alpha = std::isfinite(ly) ? std::min(0.0, ly - lp) : kNegInf;
    const bool accept = std::log(uniform01(rng)) < log_alpha;
    if (accept) {
      x = y;
      lp = ly;
    }
    const bool burning = t < cfg.burn_in;
    if (burning) {
      accepted_burn += accept;
      if (cfg.adapt) {
        const double gain = std::pow(static_cast<double>(t + 1), -0.6);
        log_scale += gain * (std::exp(log_alpha) - detail::kTargetAcceptance);
        log_scale = std::clamp(log_scale, -30.0, 30.0);
      }
      if (cfg.adapt_covariance && t >= cov_start && t < cov_stop) {
        ++cov_n;
        const Vector delta = x - cov_mean;
        cov_mean += delta / static_cast<double>(cov_n);
        cov_m2 += delta * (x - cov_mean).transpose();
        if (cov_n > static_cast<std::size_t>(2 * d) && cov_n % cov_every == 0) {
          Matrix c = cov_m2 / static_cast<double>(cov_n - 1);
          const double ridge = 1e-6 * std::max(c.diagonal().mean(), 1e-300);
          c += ridge * Matrix::Identity(d, d);
          c *= 2.38 * 2.38 / static_cast<double>(d);
          Eigen::LLT<Matrix> llt(c);
          if (llt.info() == Eigen::Success) chol = llt.matrixL();
        }
      }
    } else {
      accepted += accept;
      if ((t - cfg.burn_in) % cfg.thin == 0) out.draws.row(row++) = x.transpose();
    }
  }
  out.last = x;
  out.last_log_target = lp;
  out.acceptance = static_cast<double>(accepted) / static_cast<double>(cfg.steps - cfg.burn_in);
  out.burn_in_acceptance =
      cfg.burn_in ? static_cast<double>(accepted_burn) / static_cast<double>(cfg.burn_in) : 0.0;
  out.final_log_scale = log_scale;
  if (cfg.burn_in > 0 && accepted_burn == 0)
    out.warnings.emplace_back("all proposals were rejected during burn-in");
  if (accepted == 0) out.warnings.emplace_back("all proposals were rejected after burn-in");
  return out;
}

/// Seeded random-walk Metropolis chain returned as a SampleSet.
inline SampleSet rwm_chain(const LogTarget& log_target, const Vector& init, const McmcConfig& cfg,
                           std::vector<std::string> names = {},
                           SampleSource source = SampleSource::full) {
  Rng rng = make_rng(cfg.seed, Stream::mcmc);
  ChainResult res = run_rwm(log_target, init, cfg, rng);
  if (names.empty())
    for (Eigen::Index k = 0; k < init.size(); ++k) names.push_back("x" + std::to_string(k + 1));
  if (static_cast<Eigen::Index>(names.size()) != init.size())
    throw ConfigError("rwm_chain: names do not match the dimension");
  SampleSet out{std::move(res.draws), std::move(names), source, nlohmann::json::object()};
  out.meta["seed"] = cfg.seed;
  out.meta["steps"] = cfg.steps;
  out.meta["burn_in"] = cfg.burn_in;
  out.meta["thin"] = cfg.thin;
  out.meta["acceptance"] = res.acceptance;
  out.meta["burn_in_acceptance"] = res.burn_in_acceptance;
  out.meta["warnings"] = res.warnings;
  return out;
}

/// Indices of `k` draws resampled with probability proportional to
/// exp(log_weights - max).
inline std::vector<std::size_t> sir_indices(const Vector& log_weights, std::size_t k, Rng& rng) {
  if (log_weights.size() == 0) throw ConfigError("sir: no weights");
  double mx = kNegInf;
  for (double w : log_weights) {
    if (std::isnan(w) || w == std::numeric_limits<double>::infinity())
      throw NumericError("sir: log weight is NaN or +infinity");
    mx = std::max(mx, w);
  }
  if (mx == kNegInf) throw NumericError("sir: every log weight is -infinity");
  std::vector<double> cum(static_cast<std::size_t>(log_weights.size()));
  double total = 0.0;
  for (Eigen::Index i = 0; i < log_weights.size(); ++i) {
    total += std::exp(log_weights[i] - mx);
    cum[static_cast<std::size_t>(i)] = total;
  }
  std::vector<std::size_t> idx(k);
  for (auto& j : idx) {
    const double u = uniform01(rng) * total;
    auto it = std::upper_bound(cum.begin(), cum.end(), u);
    // upper_bound never lands on a zero-weight entry.
    if (it == cum.end()) --it;
    j = static_cast<std::size_t>(it - cum.begin());
  }
  return idx;
}

inline Matrix sir(const Vector& log_weights, const Matrix& draws, std::size_t k, std::uint64_t seed) {
  if (log_weights.size() != draws.rows()) throw ConfigError("sir: weights and draws differ in length");
  Rng rng = make_rng(seed, Stream::sir);
  const auto idx = sir_indices(log_weights, k, rng);
  Matrix out(static_cast<Eigen::Index>(k), draws.cols());
  for (std::size_t r = 0; r < k; ++r)
    out.row(static_cast<Eigen::Index>(r)) = draws.row(static_cast<Eigen::Index>(idx[r]));
  return out;
}

enum class CutVariant { nested_mcmc, conditional_normal, sir_t_proposal };

inline std::string_view to_string(CutVariant v) {
  switch (v) {
    case CutVariant::nested_mcmc: return "nested_mcmc";
    case CutVariant::conditional_normal: return "conditional_normal";
    case CutVariant::sir_t_proposal: return "sir_t_proposal";
  }
  return "unknown";
}

inline CutVariant cut_variant_from_string(std::string_view s) {
  if (s == "nested_mcmc") return CutVariant::nested_mcmc;
  if (s == "conditional_normal") return CutVariant::conditional_normal;
  if (s == "sir_t_proposal") return CutVariant::sir_t_proposal;
  throw ConfigError("unknown cut strategy '" + std::string(s) + "'");
}

/// How eta is drawn given each phi.
struct CutStrategy {
  CutVariant variant = CutVariant::conditional_normal;
  std::size_t sir_proposals = 1000;
  double t_dof = 5.0;
  /// Length of each nested chain and its burn-in.
  std::size_t nested_steps = 500;
  std::size_t nested_burn_in = 200;
  /// Abort when more than this fraction of conditional stages fail.
  double max_failure_fraction = 0.05;

  void validate() const {
    if (sir_proposals < 1) throw ConfigError("cut strategy: sir_proposals must be >= 1");
    if (!(t_dof > 0.0)) throw ConfigError("cut strategy: t_dof must be > 0");
    if (!(nested_steps > nested_burn_in)) throw ConfigError("cut strategy: nested_steps must exceed nested_burn_in");
    if (!(max_failure_fraction >= 0.0 && max_failure_fraction < 1.0))
      throw ConfigError("cut strategy: max_failure_fraction must lie in [0, 1)");
  }
};

/// One draw of eta from (an approximation of) pi(eta | w, phi). Returns
/// nullopt if the conditional stage fails at this phi.
inline std::optional<Vector> draw_conditional_eta(const TwoModuleSystem& sys, const Vector& phi,
                                                  const CutStrategy& strategy, Rng& rng,
                                                  const std::optional<Vector>& warm = std::nullopt) {
  try {
    const ConditionalNormal cn = conditional_laplace(sys, phi, warm);
    switch (strategy.variant) {
      case CutVariant::conditional_normal: return cn.draw(rng);
      case CutVariant::nested_mcmc: {
        McmcConfig c;
        c.steps = strategy.nested_steps;
        c.burn_in = strategy.nested_burn_in;
        c.adapt = false;
        c.proposal_cov = (2.38 * 2.38 / static_cast<double>(sys.d_eta())) * cn.covariance();
        auto target = [&](const Vector& eta) { return log_conditional_eta(sys, eta, phi); };
        return run_rwm(target, cn.mean, c, rng).last;
      }
      case CutVariant::sir_t_proposal: {
        const auto m = static_cast<Eigen::Index>(strategy.sir_proposals);
        Matrix props(m, cn.mean.size());
        Vector lw(m);
        for (Eigen::Index j = 0; j < m; ++j) {
          const Vector e = mvt_draw(rng, cn.mean, cn.cholesky(), strategy.t_dof);
          props.row(j) = e.transpose();
          const double lt = log_conditional_eta(sys, e, phi);
          lw[j] = lt == kNegInf ? kNegInf
                                : lt - mvt_log_density(e, cn.mean, cn.cholesky(), strategy.t_dof);
        }
        const auto idx = sir_indices(lw, 1, rng);
        return Vector(props.row(static_cast<Eigen::Index>(idx[0])).transpose());
      }
    }
  } catch (const NumericError&) {
  }
  return std::nullopt;
}

namespace detail {

struct PhiStage {
  Matrix draws;
  std::string method;
  nlohmann::json meta = nlohmann::json::object();
};

inline PhiStage draw_cut_phi(const TwoModuleSystem& sys, std::size_t S, const McmcConfig& cfg) {
  PhiStage st;
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  st.draws.resize(static_cast<Eigen::Index>(S), dp);
  if (sys.phi_sampler) {
    st.method = "direct";
    Rng rng = make_rng(cfg.seed, Stream::phi);
    for (std::size_t s = 0; s < S; ++s) {
      const Vector p = sys.draw_phi(rng);
      if (p.size() != dp) throw ConfigError("phi sampler returned the wrong dimension");
      st.draws.row(static_cast<Eigen::Index>(s)) = p.transpose();
    }
    return st;
  }
  if (sys.phi_init.size() == 0)
    throw ConfigError("cut sampling by MCMC needs phi_init when no direct sampler is registered");
  st.method = "mcmc";
  McmcConfig c = cfg;
  c.steps = cfg.burn_in + S * cfg.thin;
  Rng rng = make_rng(cfg.seed, Stream::phi);
  auto res = run_rwm([&](const Vector& p) { return log_cut_marginal_phi(sys, p); }, sys.phi_init, c,
                     rng);
  st.draws = std::move(res.draws);
  st.meta["acceptance"] = res.acceptance;
  st.meta["burn_in_acceptance"] = res.burn_in_acceptance;
  st.meta["warnings"] = res.warnings;
  return st;
}

}  // namespace detail

/// Sequential cut sampler. Results depend only on (seed, S, strategy), not on
/// `threads`.
inline SampleSet sample_cut(const TwoModuleSystem& sys, std::size_t S, const CutStrategy& strategy,
                            const McmcConfig& cfg, std::size_t threads = 1) {
  sys.validate();
  strategy.validate();
  if (S < 1) throw ConfigError("sample_cut: S must be >= 1");
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  const auto de = static_cast<Eigen::Index>(sys.d_eta());

  detail::PhiStage phi = detail::draw_cut_phi(sys, S, cfg);

  // Every conditional solve starts from the mode at the mean phi, so no
  // solve depends on another's outcome.
  std::optional<Vector> warm;
  {
    const Vector ref = phi.draws.colwise().mean().transpose();
    try {
      auto r = solve_conditional_mode(sys, ref);
      if (r.converged) warm = r.eta_hat;
    } catch (const NumericError&) {
    }
  }

  Matrix draws(static_cast<Eigen::Index>(S), dp + de);
  draws.leftCols(dp) = phi.draws;
  std::vector<char> ok(S, 0);
  parallel_for(S, threads, [&](std::size_t s) {
    Rng rng = make_rng(cfg.seed, Stream::eta, s);
    const Vector p = phi.draws.row(static_cast<Eigen::Index>(s)).transpose();
    if (auto e = draw_conditional_eta(sys, p, strategy, rng, warm)) {
      draws.row(static_cast<Eigen::Index>(s)).tail(de) = e->transpose();
      ok[s] = 1;
    }
  });

  // Failed stages get a fresh phi, processed in index order.
  const std::size_t max_failures =
      static_cast<std::size_t>(std::floor(strategy.max_failure_fraction * static_cast<double>(S)));
  std::size_t failures = 0;
  Rng spare = make_rng(cfg.seed, Stream::spare_phi);
  for (std::size_t s = 0; s < S; ++s) {
    while (!ok[s]) {
      if (++failures > max_failures)
        throw NumericError("sample_cut: conditional stage failed at " + std::to_string(failures) +
                           " of " + std::to_string(S) + " phi draws (limit " +
                           std::to_string(max_failures) + ")");
      Vector p;
      if (sys.phi_sampler) {
        p = sys.draw_phi(spare);
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, S - 1);
        p = phi.draws.row(static_cast<Eigen::Index>(pick(spare))).transpose();
      }
      Rng rng = make_rng(cfg.seed, Stream::eta, S + failures);
      if (auto e = draw_conditional_eta(sys, p, strategy, rng, warm)) {
        draws.row(static_cast<Eigen::Index>(s)).head(dp) = p.transpose();
        draws.row(static_cast<Eigen::Index>(s)).tail(de) = e->transpose();
        ok[s] = 1;
      }
    }
  }

  SampleSet out{std::move(draws), sys.names(), SampleSource::cut, nlohmann::json::object()};
  out.meta["seed"] = cfg.seed;
  out.meta["S"] = S;
  out.meta["strategy"] = std::string(to_string(strategy.variant));
  if (strategy.variant == CutVariant::sir_t_proposal) {
    out.meta["sir_proposals"] = strategy.sir_proposals;
    out.meta["t_dof"] = strategy.t_dof;
  }
  if (strategy.variant == CutVariant::nested_mcmc) {
    out.meta["nested_steps"] = strategy.nested_steps;
    out.meta["nested_burn_in"] = strategy.nested_burn_in;
  }
  out.meta["phi_stage"] = phi.method;
  if (!phi.meta.empty()) out.meta["phi_chain"] = phi.meta;
  out.meta["conditional_failures"] = failures;
  out.meta["nu"] = sys.nu;
  out.meta["nu_prime"] = sys.nu_prime;
  return out;
}

namespace detail {

// Centre and spread of pi_cut(phi | z): moments of direct draws when a
// sampler exists, else the marginal Laplace approximation.
inline std::pair<Vector, Matrix> phi_start(const TwoModuleSystem& sys, std::uint64_t seed) {
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  Vector phi0;
  Matrix cov_phi;
  if (sys.phi_sampler) {
    Rng rng = make_rng(seed, Stream::phi, 1);
    const int m = 500;
    Matrix x(m, dp);
    for (int i = 0; i < m; ++i) x.row(i) = sys.draw_phi(rng).transpose();
    phi0 = x.colwise().mean().transpose();
    const Matrix c = x.rowwise() - phi0.transpose();
    cov_phi = c.transpose() * c / (m - 1.0);
  } else {
    try {
      Gaussian g = marginal_laplace_phi(sys);
      phi0 = g.mean;
      cov_phi = g.covariance;
    } catch (const Error&) {
      if (sys.phi_init.size() == 0) throw ConfigError("phi_init or a phi sampler is required");
      phi0 = sys.phi_init;
      cov_phi = 0.01 * Matrix::Identity(dp, dp);
    }
  }
  if (!sys.prior_phi.contains(Vector(), phi0) && sys.phi_init.size() == dp) phi0 = sys.phi_init;
  return {phi0, cov_phi};
}

// Starting point and block-diagonal proposal covariance for the joint chain.
inline std::pair<Vector, Matrix> full_chain_start(const TwoModuleSystem& sys, std::uint64_t seed) {
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  const auto de = static_cast<Eigen::Index>(sys.d_eta());
  auto [phi0, cov_phi] = phi_start(sys, seed);

  Vector eta0 = sys.default_eta(phi0);
  Matrix cov_eta = Matrix::Identity(de, de) * 0.01;
  if (sys.nu_prime > 0.0) {
    try {
      ConditionalNormal cn = conditional_laplace(sys, phi0);
      eta0 = cn.mean;
      cov_eta = cn.covariance();
    } catch (const Error&) {
    }
  }
  Vector theta(dp + de);
  theta << phi0, eta0;
  Matrix cov = Matrix::Zero(dp + de, dp + de);
  cov.topLeftCorner(dp, dp) = cov_phi;
  cov.bottomRightCorner(de, de) = cov_eta;
  cov *= 2.38 * 2.38 / static_cast<double>(dp + de);
  const double ridge = 1e-10 * std::max(cov.diagonal().mean(), 1e-300);
  cov += ridge * Matrix::Identity(dp + de, dp + de);
  return {theta, cov};
}

}  // namespace detail

/// Joint random-walk Metropolis on the full generalized posterior, or the
/// system's registered full sampler. The chain runs burn_in + S * thin steps;
/// `cfg.steps` is ignored.
inline SampleSet sample_full(const TwoModuleSystem& sys, std::size_t S, const McmcConfig& cfg) {
  sys.validate();
  if (S < 1) throw ConfigError("sample_full: S must be >= 1");
  if (sys.full_sampler) {
    if (cfg.thin < 1) throw ConfigError("mcmc: thin must be >= 1");
    Matrix draws = sys.full_sampler(sys, S, cfg.burn_in, cfg.thin, cfg.seed);
    if (draws.rows() != static_cast<Eigen::Index>(S) ||
        draws.cols() != static_cast<Eigen::Index>(sys.d_phi() + sys.d_eta()))
      throw ConfigError("full sampler returned the wrong shape");
    SampleSet out{std::move(draws), sys.names(), SampleSource::full, nlohmann::json::object()};
    out.meta["sampler"] = "model";
    out.meta["seed"] = cfg.seed;
    out.meta["S"] = S;
    out.meta["burn_in"] = cfg.burn_in;
    out.meta["thin"] = cfg.thin;
    out.meta["warnings"] = nlohmann::json::array();
    out.meta["nu"] = sys.nu;
    out.meta["nu_prime"] = sys.nu_prime;
    return out;
  }
  auto [theta0, cov] = detail::full_chain_start(sys, cfg.seed);
  McmcConfig c = cfg;
  c.steps = cfg.burn_in + S * cfg.thin;
  if (c.proposal_cov.size() == 0) c.proposal_cov = cov;
  Rng rng = make_rng(cfg.seed, Stream::mcmc);
  auto target = [&](const Vector& th) { return log_generalized_posterior(sys, th); };
  ChainResult res = run_rwm(target, theta0, c, rng);
  SampleSet out{std::move(res.draws), sys.names(), SampleSource::full, nlohmann::json::object()};
  out.meta["sampler"] = "rwm";
  out.meta["seed"] = cfg.seed;
  out.meta["S"] = S;
  out.meta["burn_in"] = cfg.burn_in;
  out.meta["thin"] = cfg.thin;
  out.meta["acceptance"] = res.acceptance;
  out.meta["burn_in_acceptance"] = res.burn_in_acceptance;
  out.meta["warnings"] = res.warnings;
  out.meta["nu"] = sys.nu;
  out.meta["nu_prime"] = sys.nu_prime;
  return out;
}

}  // namespace cutpost
