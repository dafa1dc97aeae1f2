#pragma once

// Marginal semi-modular posterior
//   log pi_gamma(phi) = log pi_cut(phi | z) + gamma * ln m_hat(w | phi)
// with the feedback term estimated by Chib's identity at a normal plug-in:
//   ln m_hat = ln pi(eta*|phi) + nu' M(eta*|phi) - ln N(eta*; eta_hat, [n2 nu' J]^-1).

#include <cstring>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include "cutpost/core.hpp"
#include "cutpost/laplace.hpp"
#include "cutpost/parallel.hpp"
#include "cutpost/samplers.hpp"

namespace cutpost {

/// ln m_hat_eta(w | phi). `eta_star` defaults to eta_hat(phi).
inline double chib_log_mhat(const TwoModuleSystem& sys, const ConditionalNormal& cn,
                            const std::optional<Vector>& eta_star = std::nullopt) {
  const Vector& e = eta_star ? *eta_star : cn.mean;
  if (e.size() != cn.mean.size()) throw ConfigError("eta_star has the wrong dimension");
  const double kernel = log_conditional_eta(sys, e, cn.phi);
  if (kernel == kNegInf) throw ConfigError("eta_star lies outside the support of pi(eta | phi)");
  return kernel - cn.log_density(e);
}

inline double chib_log_mhat(const TwoModuleSystem& sys, const Vector& phi,
                            const std::optional<Vector>& eta_star = std::nullopt) {
  return chib_log_mhat(sys, conditional_laplace(sys, phi), eta_star);
}

/// Thread-safe memo of ln m_hat keyed by the bit pattern of phi.
class MhatCache {
 public:
  std::optional<double> find(const Vector& phi) const {
    std::lock_guard lock(mutex_);
    auto it = map_.find(key(phi));
    if (it == map_.end()) return std::nullopt;
    ++hits_;
    return it->second;
  }

  void insert(const Vector& phi, double value) {
    std::lock_guard lock(mutex_);
    map_.emplace(key(phi), value);
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return map_.size();
  }
  std::size_t hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
  }

 private:
  static std::string key(const Vector& phi) {
    std::string k(static_cast<std::size_t>(phi.size()) * sizeof(double), '\0');
    std::memcpy(k.data(), phi.data(), k.size());
    return k;
  }

  mutable std::mutex mutex_;
  mutable std::size_t hits_ = 0;
  std::unordered_map<std::string, double> map_;
};

using EtaStarRule = std::function<Vector(const Vector& phi)>;

/// log pi_cut(phi | z) + gamma * ln m_hat(w | phi). At gamma = 0 this is the
/// cut marginal exactly and module two is never touched.
inline double log_smi_target(const TwoModuleSystem& sys, const Vector& phi, double gamma,
                             const EtaStarRule& eta_star = {}, MhatCache* cache = nullptr) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  const double cut = log_cut_marginal_phi(sys, phi);
  if (cut == kNegInf || gamma == 0.0) return cut;
  if (cache)
    if (auto v = cache->find(phi)) return cut + gamma * *v;
  const double lm = eta_star ? chib_log_mhat(sys, phi, eta_star(phi)) : chib_log_mhat(sys, phi);
  if (cache) cache->insert(phi, lm);
  return cut + gamma * lm;
}

struct SmiConfig {
  double gamma = 0.0;
  McmcConfig cfg;
  /// Empty = eta_hat(phi); otherwise the supplied rule.
  EtaStarRule eta_star;
  /// Attach one eta draw per phi draw with this strategy.
  std::optional<CutStrategy> augment;
  std::size_t threads = 1;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("smi: gamma must lie in [0, 1]");
    if (augment) augment->validate();
  }
};

/// Metropolis chain on log_smi_target. Symmetric proposals, so the
/// acceptance ratio is the ratio of targets; the prior already sits inside
/// pi_cut and is not applied a second time. With `augment`, eta is drawn
/// afterwards for every kept phi.
inline SampleSet sample_smi(const TwoModuleSystem& sys, std::size_t S, const SmiConfig& smi) {
  sys.validate();
  smi.validate();
  if (S < 1) throw ConfigError("sample_smi: S must be >= 1");
  const auto dp = static_cast<Eigen::Index>(sys.d_phi());
  const auto de = static_cast<Eigen::Index>(sys.d_eta());

  auto [phi0, cov] = detail::phi_start(sys, smi.cfg.seed);
  McmcConfig c = smi.cfg;
  c.steps = c.burn_in + S * c.thin;
  if (c.proposal_cov.size() == 0) c.proposal_cov = (2.38 * 2.38 / static_cast<double>(dp)) * cov;
  if (sys.phi_init.size() == dp) phi0 = sys.phi_init;

  MhatCache cache;
  std::size_t solve_failures = 0;
  auto target = [&](const Vector& phi) {
    try {
      return log_smi_target(sys, phi, smi.gamma, smi.eta_star, &cache);
    } catch (const NumericError&) {
      ++solve_failures;
      return kNegInf;
    }
  };
  Rng rng = make_rng(smi.cfg.seed, Stream::mcmc);
  ChainResult res = run_rwm(target, phi0, c, rng);

  SampleSet out;
  out.source = SampleSource::smi;
  out.meta["seed"] = smi.cfg.seed;
  out.meta["gamma"] = smi.gamma;
  out.meta["S"] = S;
  out.meta["burn_in"] = c.burn_in;
  out.meta["thin"] = c.thin;
  out.meta["acceptance"] = res.acceptance;
  out.meta["burn_in_acceptance"] = res.burn_in_acceptance;
  out.meta["warnings"] = res.warnings;
  out.meta["eta_star"] = smi.eta_star ? "supplied" : "mode";
  out.meta["rejected_solve_failures"] = solve_failures;
  out.meta["cache_entries"] = cache.size();

  if (!smi.augment) {
    out.draws = std::move(res.draws);
    out.names = sys.phi_names;
    return out;
  }

  const CutStrategy& st = *smi.augment;
  Matrix draws(static_cast<Eigen::Index>(S), dp + de);
  draws.leftCols(dp) = res.draws;
  std::optional<Vector> warm;
  try {
    auto r = solve_conditional_mode(sys, Vector(res.draws.colwise().mean().transpose()));
    if (r.converged) warm = r.eta_hat;
  } catch (const NumericError&) {
  }
  std::vector<char> ok(S, 0);
  parallel_for(S, smi.threads, [&](std::size_t s) {
    Rng r = make_rng(smi.cfg.seed, Stream::augment, s);
    const Vector p = res.draws.row(static_cast<Eigen::Index>(s)).transpose();
    if (auto e = draw_conditional_eta(sys, p, st, r, warm)) {
      draws.row(static_cast<Eigen::Index>(s)).tail(de) = e->transpose();
      ok[s] = 1;
    }
  });
  std::size_t failed = 0;
  for (char v : ok) failed += !v;
  if (static_cast<double>(failed) > st.max_failure_fraction * static_cast<double>(S))
    throw NumericError("sample_smi: eta augmentation failed at " + std::to_string(failed) + " of " +
                       std::to_string(S) + " phi draws");
  if (failed) {
    Matrix kept(static_cast<Eigen::Index>(S - failed), dp + de);
    Eigen::Index r = 0;
    for (std::size_t s = 0; s < S; ++s)
      if (ok[s]) kept.row(r++) = draws.row(static_cast<Eigen::Index>(s));
    draws = std::move(kept);
  }
  out.draws = std::move(draws);
  out.names = sys.names();
  out.meta["strategy"] = std::string(to_string(st.variant));
  out.meta["augment_failures_dropped"] = failed;
  return out;
}

}  // namespace cutpost
