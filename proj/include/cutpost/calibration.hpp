#pragma once

// Learning rates by matching Fisher information:
//   nu = tr(Sigma Psi^-1 Sigma) / tr(Sigma)
// with Sigma the per-observation loss curvature and Psi the per-observation
// score covariance, for each module.

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "cutpost/core.hpp"
#include "cutpost/optimize.hpp"
#include "cutpost/parallel.hpp"
#include "cutpost/random.hpp"

namespace cutpost {

/// tr(Sigma Psi^-1 Sigma) / tr(Sigma). Throws `NumericError` if Psi is
/// singular and `ConfigError` for mismatched or non-positive inputs.
inline double learning_rate_from_blocks(const Matrix& sigma, const Matrix& psi) {
  if (sigma.rows() != sigma.cols() || psi.rows() != psi.cols() || sigma.rows() != psi.rows() ||
      sigma.rows() == 0)
    throw ConfigError("calibration: Sigma and Psi must be square and of equal size");
  const double tr = sigma.trace();
  if (!(tr > 0.0)) throw NumericError("calibration: tr(Sigma) is not positive");
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (psi + psi.transpose()), Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (!(lo > 1e-12 * std::max(hi, 0.0)) || !(hi > 0.0)) {
    std::ostringstream os;
    os << "calibration: Psi is singular (smallest eigenvalue " << lo
       << "); score outer products carry no information here, e.g. one observation per "
          "parameter evaluated at its own optimum. Use the Bayesian-bootstrap estimate "
          "(calibrate_nu2_bootstrap) with the grouped raw data instead";
    throw NumericError(os.str());
  }
  const Matrix x = psi.ldlt().solve(sigma);
  return (sigma * x).trace() / tr;
}

enum class CalibrateWhich { both, module1, module2 };

struct CalibrationOptions {
  CalibrateWhich which = CalibrateWhich::both;
  /// eta coordinates used for module two; empty = all. Others are held fixed
  /// at the centre of the conditional solve.
  std::vector<std::size_t> eta_mask;
};

struct CalibrationReport {
  double nu = 1.0;
  double nu_prime = 1.0;
  bool nu_calibrated = false;
  bool nu_prime_calibrated = false;
  Matrix Sigma11, Psi11, Sigma22, Psi22;
  Vector phi_hat, eta_hat;
  std::vector<std::size_t> eta_mask;
  std::string psi22_method = "plug-in";
  std::size_t bootstrap_replicates = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    a.push_back(row);
  }
  return a;
}

inline std::vector<double> vector_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline std::vector<Eigen::Index> resolve_mask(const std::vector<std::size_t>& mask, std::size_t d) {
  std::vector<Eigen::Index> idx;
  if (mask.empty()) {
    for (std::size_t k = 0; k < d; ++k) idx.push_back(static_cast<Eigen::Index>(k));
    return idx;
  }
  for (auto k : mask) {
    if (k >= d) throw ConfigError("calibration: eta mask index out of range");
    idx.push_back(static_cast<Eigen::Index>(k));
  }
  return idx;
}

inline Vector take(const Vector& v, const std::vector<Eigen::Index>& idx) {
  Vector out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[idx[k]];
  return out;
}

inline Matrix take(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  Matrix out(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b) out(a, b) = m(idx[a], idx[b]);
  return out;
}

// Loss-only maximizer of M over the masked eta coordinates, the rest fixed.
inline Vector masked_loss_mode(const TwoModuleSystem& sys, const Vector& phi, Vector eta,
                               const std::vector<Eigen::Index>& idx) {
  auto embed = [&](const Vector& x) {
    Vector e = eta;
    for (std::size_t k = 0; k < idx.size(); ++k) e[idx[k]] = x[static_cast<Eigen::Index>(k)];
    return e;
  };
  NewtonOptions opt;
  opt.scale = static_cast<double>(sys.n2());
  auto res = newton_maximize(
      [&](const Vector& x) {
        const Vector e = embed(x);
        if (!sys.prior_eta.contains(e, phi)) return kNegInf;
        return -module_loss(sys.module2, e, phi);
      },
      [&](const Vector& x) { return Vector(-take(module_gradient(sys.module2, embed(x), phi), idx)); },
      [&](const Vector& x) { return Matrix(-take(module_hessian(sys.module2, embed(x), phi), idx)); },
      take(eta, idx), opt);
  if (!res.converged) throw NumericError("calibration: module-two loss mode not found: " + res.message);
  return embed(res.x);
}

}  // namespace detail

inline nlohmann::json to_json(const CalibrationReport& r) {
  nlohmann::json j;
  j["nu"] = r.nu;
  j["nu_prime"] = r.nu_prime;
  j["nu_calibrated"] = r.nu_calibrated;
  j["nu_prime_calibrated"] = r.nu_prime_calibrated;
  if (r.Sigma11.size()) j["Sigma11"] = detail::matrix_json(r.Sigma11);
  if (r.Psi11.size()) j["Psi11"] = detail::matrix_json(r.Psi11);
  if (r.Sigma22.size()) j["Sigma22"] = detail::matrix_json(r.Sigma22);
  if (r.Psi22.size()) j["Psi22"] = detail::matrix_json(r.Psi22);
  j["phi_hat"] = detail::vector_std(r.phi_hat);
  j["eta_hat"] = detail::vector_std(r.eta_hat);
  j["eta_mask"] = r.eta_mask;
  j["psi22_method"] = r.psi22_method;
  if (r.bootstrap_replicates) j["bootstrap_replicates"] = r.bootstrap_replicates;
  j["warnings"] = r.warnings;
  return j;
}

namespace detail {

struct CalibrationPoint {
  Vector phi_hat;
  Vector eta_hat;
  std::vector<Eigen::Index> idx;
  Matrix sigma22;
};

inline Vector estimate_phi_hat(const TwoModuleSystem& sys) {
  auto res = solve_phi_mode(sys);
  if (!res.converged) throw NumericError("calibration: phi mode not found: " + res.message);
  return res.x;
}

inline CalibrationPoint module2_point(const TwoModuleSystem& sys, const Vector& phi_hat,
                                      const std::vector<std::size_t>& mask) {
  CalibrationPoint p;
  p.phi_hat = phi_hat;
  p.idx = resolve_mask(mask, sys.d_eta());
  TwoModuleSystem s = sys;
  if (!(s.nu_prime > 0.0)) s.nu_prime = 1.0;
  // Alternative starts look for posterior basins away from the loss minimum.
  s.eta_alt_starts = nullptr;
  auto inner = solve_conditional_mode(s, phi_hat);
  if (!inner.converged) throw NumericError("calibration: inner solve failed: " + inner.message);
  p.eta_hat = s.center == ConditionalCenter::loss_mode && mask.empty()
                  ? inner.eta_hat
                  : masked_loss_mode(s, phi_hat, inner.eta_hat, p.idx);
  p.sigma22 = take(module_hessian(sys.module2, p.eta_hat, phi_hat), p.idx) /
              static_cast<double>(sys.n2());
  return p;
}

}  // namespace detail

/// Estimate (nu, nu') at phi_hat = argmax L and eta_hat = argmax M(. | phi_hat)
/// using plug-in score covariances. A module not selected in `opt.which`
/// keeps the system's rate.
inline CalibrationReport calibrate(const TwoModuleSystem& sys, const CalibrationOptions& opt = {}) {
  sys.validate();
  CalibrationReport r;
  r.nu = sys.nu;
  r.nu_prime = sys.nu_prime;
  static const Vector empty;
  r.phi_hat = detail::estimate_phi_hat(sys);
  if (opt.which != CalibrateWhich::module2) {
    const double n1 = static_cast<double>(sys.n1());
    r.Sigma11 = module_hessian(sys.module1, empty, r.phi_hat) / n1;
    const auto dp = static_cast<Eigen::Index>(sys.d_phi());
    r.Psi11 = Matrix::Zero(dp, dp);
    for (std::size_t i = 0; i < sys.n1(); ++i) {
      const Vector g = module_obs_gradient(sys.module1, i, empty, r.phi_hat);
      r.Psi11.noalias() += g * g.transpose();
    }
    r.Psi11 /= n1;
    r.nu = learning_rate_from_blocks(r.Sigma11, r.Psi11);
    r.nu_calibrated = true;
  }
  if (opt.which != CalibrateWhich::module1) {
    auto p = detail::module2_point(sys, r.phi_hat, opt.eta_mask);
    r.eta_hat = p.eta_hat;
    r.Sigma22 = p.sigma22;
    const auto k = static_cast<Eigen::Index>(p.idx.size());
    r.Psi22 = Matrix::Zero(k, k);
    for (std::size_t i = 0; i < sys.n2(); ++i) {
      const Vector g = detail::take(module_obs_gradient(sys.module2, i, p.eta_hat, r.phi_hat), p.idx);
      r.Psi22.noalias() += g * g.transpose();
    }
    r.Psi22 /= static_cast<double>(sys.n2());
    r.eta_mask.assign(p.idx.begin(), p.idx.end());
    r.nu_prime = learning_rate_from_blocks(r.Sigma22, r.Psi22);
    r.nu_prime_calibrated = true;
  }
  return r;
}

/// Raw data behind module two, grouped for the Bayesian bootstrap. Module-two
/// observation i is built from the atoms of group group_of[i];
/// `reweighted_score(i, weights, eta, phi)` returns the eta-gradient of
/// m_i recomputed with the group's atoms reweighted by `weights` (which sum
/// to one; uniform weights must reproduce the original observation).
struct GroupedData {
  std::vector<std::size_t> group_of;
  std::vector<std::size_t> group_size;
  std::function<Vector(std::size_t i, const std::vector<double>& weights, const Vector& eta,
                       const Vector& phi)>
      reweighted_score;

  void validate(std::size_t n2) const {
    if (group_of.size() != n2) throw ConfigError("grouped data: group_of must have one entry per module-two observation");
    for (auto g : group_of)
      if (g >= group_size.size()) throw ConfigError("grouped data: group index out of range");
    for (auto s : group_size)
      if (s == 0) throw ConfigError("grouped data: empty group");
    if (!reweighted_score) throw ConfigError("grouped data: reweighted_score is required");
  }
};

struct BootstrapOptions {
  std::size_t B = 1000;
  std::uint64_t seed = 0;
  std::vector<std::size_t> eta_mask;
  /// Replace the Dirichlet draws by uniform weights (degenerate limit).
  bool uniform_weights = false;
  std::size_t threads = 1;
};

/// nu' with Psi22 from Dirichlet-reweighted groups:
///   Psi22 = (1/n2)(1/B) sum_b sum_i g_i^(b) g_i^(b)^T.
/// Fewer than 50 replicates is allowed but flagged in `warnings`.
inline CalibrationReport calibrate_nu2_bootstrap(const TwoModuleSystem& sys, const GroupedData& data,
                                                 const BootstrapOptions& opt = {}) {
  sys.validate();
  data.validate(sys.n2());
  if (opt.B < 1) throw ConfigError("bootstrap: B must be >= 1");
  CalibrationReport r;
  r.nu = sys.nu;
  r.nu_prime = sys.nu_prime;
  if (opt.B < 50)
    r.warnings.push_back("bootstrap: B = " + std::to_string(opt.B) +
                         " replicates is small; estimates of Psi22 will be noisy");
  r.phi_hat = detail::estimate_phi_hat(sys);
  auto p = detail::module2_point(sys, r.phi_hat, opt.eta_mask);
  r.eta_hat = p.eta_hat;
  r.Sigma22 = p.sigma22;
  r.eta_mask.assign(p.idx.begin(), p.idx.end());
  const auto k = static_cast<Eigen::Index>(p.idx.size());
  const std::size_t groups = data.group_size.size();

  std::vector<Matrix> partial(opt.B, Matrix::Zero(k, k));
  parallel_for(opt.B, opt.threads, [&](std::size_t b) {
    Rng rng = make_rng(opt.seed, Stream::bootstrap, b);
    std::vector<std::vector<double>> w(groups);
    for (std::size_t g = 0; g < groups; ++g) {
      if (opt.uniform_weights)
        w[g].assign(data.group_size[g], 1.0 / static_cast<double>(data.group_size[g]));
      else
        w[g] = dirichlet_draw(rng, data.group_size[g]);
    }
    Matrix& acc = partial[b];
    for (std::size_t i = 0; i < sys.n2(); ++i) {
      const Vector g =
          detail::take(data.reweighted_score(i, w[data.group_of[i]], p.eta_hat, r.phi_hat), p.idx);
      acc.noalias() += g * g.transpose();
    }
  });
  r.Psi22 = Matrix::Zero(k, k);
  for (const auto& m : partial) r.Psi22 += m;
  r.Psi22 /= static_cast<double>(sys.n2()) * static_cast<double>(opt.B);
  r.nu_prime = learning_rate_from_blocks(r.Sigma22, r.Psi22);
  r.nu_prime_calibrated = true;
  r.psi22_method = opt.uniform_weights ? "bootstrap-uniform" : "bayesian-bootstrap";
  r.bootstrap_replicates = opt.B;
  return r;
}

}  // namespace cutpost
