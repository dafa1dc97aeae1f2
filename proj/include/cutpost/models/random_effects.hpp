#pragma once

// Normal random-effects model reduced to sufficient statistics.
//   Y_ij ~ N(beta_i, phi_i^2),  beta_i ~ N(0, psi^2)
//   module 1: z_i = sum_j (Y_ij - w_i)^2 ~ Gamma((J-1)/2, rate 1/(2 phi_i^2)),  pi(phi_i) ∝ 1/phi_i
//   module 2: w_i = mean_j Y_ij ~ N(beta_i, phi_i^2 / J) or Tukey's loss,
//             pi(psi | phi) ∝ psi / (phibar^2 / J + psi^2),  phibar^2 = mean phi_i^2
// eta = (beta_1..beta_N, psi).

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "cutpost/calibration.hpp"
#include "cutpost/core.hpp"
#include "cutpost/io/csv.hpp"
#include "cutpost/random.hpp"

namespace cutpost::models {

struct ReData {
  Matrix Y;  // N x J
  Vector z;  // within-group sums of squares
  Vector w;  // group means

  std::size_t groups() const { return static_cast<std::size_t>(Y.rows()); }
  std::size_t replicates() const { return static_cast<std::size_t>(Y.cols()); }

  static ReData from_raw(Matrix y) {
    if (y.rows() < 1 || y.cols() < 1) throw ConfigError("re data: need N >= 1 and J >= 1");
    if (!y.allFinite()) throw ConfigError("re data: non-finite observation");
    ReData d;
    d.w = y.rowwise().mean();
    d.z = (y.colwise() - d.w).array().square().rowwise().sum();
    d.Y = std::move(y);
    return d;
  }
};

/// Y_ij ~ N(beta_i, phi_i^2) with beta_i ~ N(0, psi^2) unless overridden.
/// `phi_values` holds N entries or a single broadcast value; `beta_overrides`
/// maps a zero-based group index to a fixed beta.
inline ReData re_simulate(std::size_t N, std::size_t J, double psi, const std::vector<double>& phi_values,
                          const std::map<std::size_t, double>& beta_overrides, std::uint64_t seed) {
  if (N < 1 || J < 1) throw ConfigError("re simulator: N and J must be >= 1");
  if (!(psi >= 0.0)) throw ConfigError("re simulator: psi must be >= 0");
  if (phi_values.size() != 1 && phi_values.size() != N)
    throw ConfigError("re simulator: phi_values must have 1 or N entries");
  for (double p : phi_values)
    if (!(p > 0.0) || !std::isfinite(p)) throw ConfigError("re simulator: every phi_i must be > 0");
  for (const auto& [i, b] : beta_overrides)
    if (i >= N) throw ConfigError("re simulator: beta override index out of range");
  Rng rng = make_rng(seed, Stream::simulate);
  std::normal_distribution<double> normal;
  Matrix y(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(J));
  for (std::size_t i = 0; i < N; ++i) {
    double beta = psi * normal(rng);
    if (auto it = beta_overrides.find(i); it != beta_overrides.end()) beta = it->second;
    const double phi = phi_values.size() == 1 ? phi_values[0] : phi_values[i];
    for (std::size_t j = 0; j < J; ++j)
      y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = beta + phi * normal(rng);
  }
  return ReData::from_raw(std::move(y));
}

/// Long format: columns group, replicate, y (1-based indices).
inline ReData read_re_csv(const std::string& path) {
  const auto t = io::read_csv(path);
  const Matrix m = io::numeric_columns(t, {"group", "replicate", "y"});
  Eigen::Index N = 0, J = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (m(r, 0) < 1 || m(r, 1) < 1 || m(r, 0) != std::floor(m(r, 0)) || m(r, 1) != std::floor(m(r, 1)))
      throw IoError("re csv: group and replicate must be positive integers");
    N = std::max(N, static_cast<Eigen::Index>(m(r, 0)));
    J = std::max(J, static_cast<Eigen::Index>(m(r, 1)));
  }
  if (m.rows() != N * J) throw IoError("re csv: expected a complete N x J layout");
  Matrix y = Matrix::Constant(N, J, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    y(static_cast<Eigen::Index>(m(r, 0)) - 1, static_cast<Eigen::Index>(m(r, 1)) - 1) = m(r, 2);
  if (!y.allFinite()) throw IoError("re csv: duplicate or missing (group, replicate) entries");
  return ReData::from_raw(std::move(y));
}

inline void write_re_csv(const std::string& path, const ReData& d) {
  Matrix m(d.Y.size(), 3);
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < d.Y.rows(); ++i)
    for (Eigen::Index j = 0; j < d.Y.cols(); ++j, ++r) m.row(r) << i + 1.0, j + 1.0, d.Y(i, j);
  io::write_numeric_csv(path, {"group", "replicate", "y"}, m);
}

struct ReLoss {
  enum class Kind { gaussian, tukey } kind = Kind::gaussian;
  double kappa = 5.0;

  static ReLoss gaussian() { return {}; }
  static ReLoss tukey(double kappa) { return {Kind::tukey, kappa}; }

  void validate() const {
    if (kind == Kind::tukey && !(kappa > 0.0)) throw ConfigError("tukey loss: kappa must be > 0");
  }

  /// rho(u): u^2/2, or Tukey's u^2/2 - u^4/(2k^2) + u^6/(6k^4) for |u| <= k and k^2/6 beyond.
  double rho(double u) const {
    if (kind == Kind::gaussian) return 0.5 * u * u;
    if (std::abs(u) > kappa) return kappa * kappa / 6.0;
    const double u2 = u * u, k2 = kappa * kappa;
    return 0.5 * u2 - u2 * u2 / (2.0 * k2) + u2 * u2 * u2 / (6.0 * k2 * k2);
  }
  double rho1(double u) const {
    if (kind == Kind::gaussian) return u;
    if (std::abs(u) > kappa) return 0.0;
    const double t = 1.0 - u * u / (kappa * kappa);
    return u * t * t;
  }
  double rho2(double u) const {
    if (kind == Kind::gaussian) return 1.0;
    if (std::abs(u) > kappa) return 0.0;
    const double r = u * u / (kappa * kappa);
    return (1.0 - r) * (1.0 - 5.0 * r);
  }
};

/// Per-observation module-two loss 1/2 log(2 pi phi^2 / J) + rho(w') with
/// w' = (w - beta) / (phi / sqrt(J)).
inline double re_obs_loss(const ReLoss& loss, double w, double beta, double phi, double J) {
  const double s = phi / std::sqrt(J);
  return 0.5 * std::log(2.0 * std::numbers::pi * s * s) + loss.rho((w - beta) / s);
}

namespace detail {

inline LossModule re_gamma_module(const ReData& d) {
  const auto N = static_cast<Eigen::Index>(d.groups());
  const double a = 0.5 * (static_cast<double>(d.replicates()) - 1.0);
  const Vector z = d.z;
  std::vector<double> cz(static_cast<std::size_t>(N));
  for (Eigen::Index i = 0; i < N; ++i) cz[static_cast<std::size_t>(i)] = std::lgamma(a) - (a - 1.0) * std::log(z[i]);
  auto term = [a, z, cz](Eigen::Index i, double p) {
    return a * std::log(2.0 * p * p) + cz[static_cast<std::size_t>(i)] + z[i] / (2.0 * p * p);
  };
  auto g1 = [a, z](Eigen::Index i, double p) { return 2.0 * a / p - z[i] / (p * p * p); };
  auto h1 = [a, z](Eigen::Index i, double p) { return -2.0 * a / (p * p) + 3.0 * z[i] / (p * p * p * p); };
  LossModule m;
  m.wrt = Block::phi;
  m.n_obs = d.groups();
  m.loss = [term](std::size_t i, const Vector&, const Vector& phi) {
    const auto k = static_cast<Eigen::Index>(i);
    return term(k, phi[k]);
  };
  m.sum_loss = [term, N](const Vector&, const Vector& phi) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) s += term(i, phi[i]);
    return s;
  };
  m.grad = [g1, N](std::size_t i, const Vector&, const Vector& phi) {
    Vector g = Vector::Zero(N);
    const auto k = static_cast<Eigen::Index>(i);
    g[k] = g1(k, phi[k]);
    return g;
  };
  m.sum_grad = [g1, N](const Vector&, const Vector& phi) {
    Vector g(N);
    for (Eigen::Index i = 0; i < N; ++i) g[i] = g1(i, phi[i]);
    return g;
  };
  m.sum_hess = [h1, N](const Vector&, const Vector& phi) {
    Vector h(N);
    for (Eigen::Index i = 0; i < N; ++i) h[i] = h1(i, phi[i]);
    return Matrix(h.asDiagonal());
  };
  return m;
}

inline LossModule re_location_module(const ReData& d, const ReLoss& loss) {
  const auto N = static_cast<Eigen::Index>(d.groups());
  const double J = static_cast<double>(d.replicates());
  const Vector w = d.w;
  const double sqJ = std::sqrt(J);
  LossModule m;
  m.wrt = Block::eta;
  m.n_obs = d.groups();
  m.loss = [=](std::size_t i, const Vector& eta, const Vector& phi) {
    const auto k = static_cast<Eigen::Index>(i);
    return re_obs_loss(loss, w[k], eta[k], phi[k], J);
  };
  m.sum_loss = [=](const Vector& eta, const Vector& phi) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) s += re_obs_loss(loss, w[i], eta[i], phi[i], J);
    return s;
  };
  m.grad = [=](std::size_t i, const Vector& eta, const Vector& phi) {
    const auto k = static_cast<Eigen::Index>(i);
    Vector g = Vector::Zero(N + 1);
    const double s = phi[k] / sqJ;
    g[k] = -loss.rho1((w[k] - eta[k]) / s) / s;
    return g;
  };
  m.sum_grad = [=](const Vector& eta, const Vector& phi) {
    Vector g = Vector::Zero(N + 1);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double s = phi[i] / sqJ;
      g[i] = -loss.rho1((w[i] - eta[i]) / s) / s;
    }
    return g;
  };
  m.sum_hess = [=](const Vector& eta, const Vector& phi) {
    Matrix h = Matrix::Zero(N + 1, N + 1);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double s = phi[i] / sqJ;
      h(i, i) = loss.rho2((w[i] - eta[i]) / s) / (s * s);
    }
    return h;
  };
  return m;
}

inline LogPrior re_eta_prior(Eigen::Index N, double J) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const double n = static_cast<double>(N);
  auto c_of = [J](const Vector& phi) { return phi.squaredNorm() / static_cast<double>(phi.size()) / J; };
  LogPrior p;
  p.wrt = Block::eta;
  p.support = [N](const Vector& eta, const Vector&) { return eta[N] > 0.0; };
  p.log_density = [=](const Vector& eta, const Vector& phi) {
    const double psi = eta[N];
    const double ss = eta.head(N).squaredNorm();
    return -n * (half_log_2pi + std::log(psi)) - ss / (2.0 * psi * psi) + std::log(psi) -
           std::log(c_of(phi) + psi * psi);
  };
  p.grad = [=](const Vector& eta, const Vector& phi) {
    const double psi = eta[N], c = c_of(phi);
    const double ss = eta.head(N).squaredNorm();
    Vector g(N + 1);
    g.head(N) = -eta.head(N) / (psi * psi);
    g[N] = -n / psi + ss / (psi * psi * psi) + 1.0 / psi - 2.0 * psi / (c + psi * psi);
    return g;
  };
  p.hess = [=](const Vector& eta, const Vector& phi) {
    const double psi = eta[N], c = c_of(phi);
    const double ss = eta.head(N).squaredNorm();
    const double p2 = psi * psi;
    Matrix h = Matrix::Zero(N + 1, N + 1);
    h.diagonal().head(N).setConstant(-1.0 / p2);
    h.col(N).head(N) = 2.0 * eta.head(N) / (p2 * psi);
    h.row(N).head(N) = h.col(N).head(N).transpose();
    h(N, N) = n / p2 - 3.0 * ss / (p2 * p2) - 1.0 / p2 - 2.0 * (c - p2) / ((c + p2) * (c + p2));
    return h;
  };
  return p;
}

/// Shrinkage-only slice step on [lo, hi]; exact for the target restricted to
/// the interval. A wide interval lets it move between separated modes.
template <class F>
std::pair<double, double> slice_step(const F& logf, double x, double fx, double lo, double hi, Rng& rng) {
  const double level = fx + std::log(uniform01(rng));
  for (int k = 0; k < 200; ++k) {
    const double y = lo + (hi - lo) * uniform01(rng);
    const double fy = logf(y);
    if (fy > level) return {y, fy};
    (y < x ? lo : hi) = y;
  }
  return {x, fx};
}

/// log pi(phi, psi | z, w) under the Gaussian loss, with beta integrated out.
/// Per group: w_i ~ N(0, psi^2 + s_i^2), s_i^2 = phi_i^2 / (J nu').
inline double re_group_term(double nu, double nup, double J, double z, double w, double phi, double psi2) {
  double v = -nu * ((J - 1.0) * std::log(phi) + z / (2.0 * phi * phi)) - std::log(phi);
  if (nup > 0.0) {
    const double s2 = phi * phi / (J * nup), t = psi2 + s2;
    v += -nup * std::log(phi) + 0.5 * std::log(s2 / t) - w * w / (2.0 * t);
  }
  return v;
}

inline double re_collapsed_log_density(const ReData& d, double nu, double nup, const Vector& phi, double psi) {
  const double J = static_cast<double>(d.replicates()), N = static_cast<double>(d.groups());
  double v = std::log(psi) - std::log(phi.squaredNorm() / (N * J) + psi * psi);
  for (Eigen::Index i = 0; i < phi.size(); ++i) v += re_group_term(nu, nup, J, d.z[i], d.w[i], phi[i], psi * psi);
  return v;
}

/// Full posterior under the Gaussian loss. (phi, psi) move by slice steps on
/// log scale with beta integrated out; beta is then drawn exactly given both.
/// An outlying group gives phi_i two modes (its within-group spread, or large
/// enough to explain w_i), which the joint random walk does not cross.
inline Matrix re_collapsed_full(const ReData& d, const TwoModuleSystem& sys, std::size_t S, std::size_t burn_in,
                                std::size_t thin, std::uint64_t seed) {
  const double nu = sys.nu, nup = sys.nu_prime;
  if (!(nu > 0.0)) throw ConfigError("re system: the full posterior is improper at nu = 0");
  if (!(nup > 0.0)) throw ConfigError("re system: the full posterior is improper in psi at nu' = 0");
  const auto N = static_cast<Eigen::Index>(d.groups());
  const double J = static_cast<double>(d.replicates()), n = static_cast<double>(N);
  const Vector& z = d.z;
  const Vector& w = d.w;

  Vector phi = (z.array() / (J - 1.0)).sqrt().matrix();
  const double wrms = std::sqrt(w.squaredNorm() / n);
  const double spread = 1.0 / std::sqrt(nu * (J - 1.0));
  Vector lo(N), hi(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    lo[i] = std::log(phi[i]) - 5.0 - 10.0 * spread;
    hi[i] = std::log(std::max(phi[i], (std::abs(w[i]) + wrms) * std::sqrt(J * nup))) + 5.0 + 10.0 * spread;
  }
  const double scale = std::max({wrms, phi.maxCoeff() / std::sqrt(J), 1e-12});
  const double psi_lo = std::log(scale) - 12.0, psi_hi = std::log(scale) + 6.0;
  double log_psi = std::log(std::max(wrms, scale * 1e-3));
  double sumsq = phi.squaredNorm();

  // Outlying groups also get a joint (phi_i, psi) move: a random-walk psi'
  // and phi_i' drawn from a grid version of pi(phi_i | psi', rest), accepted
  // by Metropolis-Hastings. Single-coordinate steps do not cross between the
  // two joint modes such a group creates.
  std::vector<Eigen::Index> outlying;
  {
    std::vector<double> v(w.data(), w.data() + N);
    auto median = [](std::vector<double> x) {
      auto mid = x.begin() + static_cast<std::ptrdiff_t>(x.size() / 2);
      std::nth_element(x.begin(), mid, x.end());
      return *mid;
    };
    const double med = median(v);
    for (double& x : v) x = std::abs(x - med);
    const double mad = 1.4826 * median(v);
    for (Eigen::Index i = 0; i < N; ++i)
      if (std::abs(w[i] - med) > 3.0 * mad) outlying.push_back(i);
  }
  constexpr int kGrid = 400;
  // unnormalized cumulative weights of pi(log phi_i | psi, rest) on cell centers
  auto conditional_grid = [&](Eigen::Index i, double psi2, double rest, std::vector<double>& cdf) {
    const double h = (hi[i] - lo[i]) / kGrid;
    cdf.resize(kGrid);
    std::vector<double> f(kGrid);
    double mx = kNegInf;
    for (int j = 0; j < kGrid; ++j) {
      const double u = lo[i] + (j + 0.5) * h, p = std::exp(u);
      f[j] = re_group_term(nu, nup, J, z[i], w[i], p, psi2) + u - std::log((rest + p * p) / (n * J) + psi2);
      mx = std::max(mx, f[j]);
    }
    double acc = 0.0;
    for (int j = 0; j < kGrid; ++j) cdf[j] = acc += std::exp(f[j] - mx);
  };
  auto grid_log_q = [&](Eigen::Index i, const std::vector<double>& cdf, double u) {
    const double h = (hi[i] - lo[i]) / kGrid;
    const int j = std::clamp(static_cast<int>((u - lo[i]) / h), 0, kGrid - 1);
    const double wj = cdf[j] - (j ? cdf[j - 1] : 0.0);
    return std::log(wj / cdf.back()) - std::log(h);
  };
  // log density of (log phi, log psi) with phi_i replaced
  auto log_joint = [&](double v, Eigen::Index i, double u) {
    const double p2 = std::exp(2.0 * v), pi = std::exp(u);
    double a = 2.0 * v - std::log((sumsq - phi[i] * phi[i] + pi * pi) / (n * J) + p2) + u;
    for (Eigen::Index k = 0; k < N; ++k) a += re_group_term(nu, nup, J, z[k], w[k], k == i ? pi : phi[k], p2);
    return a;
  };

  Rng rng = make_rng(seed, Stream::mcmc);
  std::normal_distribution<double> normal;
  Matrix out(static_cast<Eigen::Index>(S), 2 * N + 1);
  const std::size_t sweeps = burn_in + S * thin;
  Eigen::Index row = 0;
  for (std::size_t t = 0; t < sweeps; ++t) {
    const double psi2 = std::exp(2.0 * log_psi);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double rest = sumsq - phi[i] * phi[i];
      auto f = [&](double u) {
        const double p = std::exp(u);
        return re_group_term(nu, nup, J, z[i], w[i], p, psi2) + u - std::log((rest + p * p) / (n * J) + psi2);
      };
      const double u0 = std::log(phi[i]);
      const double u1 = slice_step(f, u0, f(u0), lo[i], hi[i], rng).first;
      phi[i] = std::exp(u1);
      sumsq = rest + phi[i] * phi[i];
    }
    auto g = [&](double v) {
      const double p2 = std::exp(2.0 * v);
      double a = 2.0 * v - std::log(sumsq / (n * J) + p2);
      for (Eigen::Index i = 0; i < N; ++i) {
        const double tt = p2 + phi[i] * phi[i] / (J * nup);
        a += -0.5 * std::log(tt) - w[i] * w[i] / (2.0 * tt);
      }
      return a;
    };
    log_psi = slice_step(g, log_psi, g(log_psi), psi_lo, psi_hi, rng).first;

    for (Eigen::Index i : outlying) {
      static constexpr double kSteps[] = {0.05, 0.2, 0.5};
      const double rest = sumsq - phi[i] * phi[i];
      const double v0 = log_psi, u0 = std::log(phi[i]);
      const double v1 = v0 + kSteps[rng() % 3] * normal(rng);
      if (v1 <= psi_lo || v1 >= psi_hi) continue;
      std::vector<double> cdf0, cdf1;
      conditional_grid(i, std::exp(2.0 * v0), rest, cdf0);
      conditional_grid(i, std::exp(2.0 * v1), rest, cdf1);
      const double r = uniform01(rng) * cdf1.back();
      const int j = static_cast<int>(std::lower_bound(cdf1.begin(), cdf1.end(), r) - cdf1.begin());
      const double h = (hi[i] - lo[i]) / kGrid;
      const double u1 = lo[i] + (std::min(j, kGrid - 1) + uniform01(rng)) * h;
      const double log_ratio = log_joint(v1, i, u1) - log_joint(v0, i, u0) + grid_log_q(i, cdf0, u0) -
                               grid_log_q(i, cdf1, u1);
      if (std::log(uniform01(rng)) < log_ratio) {
        log_psi = v1;
        phi[i] = std::exp(u1);
        sumsq = rest + phi[i] * phi[i];
      }
    }

    if (t >= burn_in && (t - burn_in) % thin == 0) {
      const double p2 = std::exp(2.0 * log_psi);
      for (Eigen::Index i = 0; i < N; ++i) {
        const double prec = 1.0 / p2 + nup * J / (phi[i] * phi[i]);
        const double mean = nup * J * w[i] / (phi[i] * phi[i]) / prec;
        out(row, N + i) = mean + normal(rng) / std::sqrt(prec);
      }
      out.row(row).head(N) = phi.transpose();
      out(row, 2 * N) = std::exp(log_psi);
      ++row;
    }
  }
  return out;
}

}  // namespace detail

/// The random-effects two-module system. The conditional approximation is
/// centred at the posterior mode because psi enters only through the prior.
inline TwoModuleSystem re_system(const ReData& d, const ReLoss& loss = ReLoss::gaussian()) {
  loss.validate();
  const auto N = static_cast<Eigen::Index>(d.groups());
  const std::size_t J = d.replicates();
  if (J < 2) throw ConfigError("re system: need J >= 2 replicates per group");
  if (!(d.z.array() > 0.0).all()) throw ConfigError("re system: every group needs z_i > 0");
  TwoModuleSystem s;
  for (Eigen::Index i = 0; i < N; ++i) s.phi_names.push_back("phi" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < N; ++i) s.eta_names.push_back("beta" + std::to_string(i + 1));
  s.eta_names.push_back("psi");
  s.module1 = detail::re_gamma_module(d);
  s.module2 = detail::re_location_module(d, loss);

  s.prior_phi.wrt = Block::phi;
  s.prior_phi.support = [](const Vector&, const Vector& phi) { return (phi.array() > 0.0).all(); };
  s.prior_phi.log_density = [](const Vector&, const Vector& phi) { return -phi.array().log().sum(); };
  s.prior_phi.grad = [](const Vector&, const Vector& phi) { return Vector(-phi.array().inverse()); };
  s.prior_phi.hess = [](const Vector&, const Vector& phi) {
    return Matrix(phi.array().square().inverse().matrix().asDiagonal());
  };
  s.prior_eta = detail::re_eta_prior(N, static_cast<double>(J));
  s.center = ConditionalCenter::posterior_mode;

  // phi_i^2 | z ~ InvGamma(nu (J - 1)/2, nu z_i / 2).
  const double a = 0.5 * (static_cast<double>(J) - 1.0);
  const Vector z = d.z;
  s.phi_sampler = [a, z](Rng& rng, double nu) {
    if (!(nu > 0.0)) throw ConfigError("re system: the cut marginal of phi is improper at nu = 0");
    Vector p(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) p[i] = std::sqrt(0.5 * nu * z[i] / gamma_draw(rng, nu * a, 1.0));
    return p;
  };
  s.phi_init = (d.z.array() / static_cast<double>(J - 1)).sqrt().matrix();
  const Vector w = d.w;
  s.eta_init = [w](const Vector&) {
    Vector e(w.size() + 1);
    e.head(w.size()) = w;
    e[w.size()] = std::max(std::sqrt(w.squaredNorm() / static_cast<double>(w.size())), 1e-3);
    return e;
  };
  if (loss.kind == ReLoss::Kind::tukey) {
    // Tukey's loss is flat for outlying groups, so beta_i near 0 is a second
    // basin next to beta_i near w_i. Start there too, with a MAD scale for psi.
    std::vector<double> v(w.data(), w.data() + w.size());
    auto median = [](std::vector<double> x) {
      auto mid = x.begin() + static_cast<std::ptrdiff_t>(x.size() / 2);
      std::nth_element(x.begin(), mid, x.end());
      return *mid;
    };
    const double med = median(v);
    for (double& x : v) x = std::abs(x - med);
    const double psi = std::max(1.4826 * median(v), 1e-3);
    s.eta_alt_starts = [w, psi](const Vector&) {
      Vector e(w.size() + 1);
      for (Eigen::Index i = 0; i < w.size(); ++i) e[i] = std::abs(w[i]) > 3.0 * psi ? 0.0 : w[i];
      e[w.size()] = psi;
      return std::vector<Vector>{e};
    };
  }
  if (loss.kind == ReLoss::Kind::gaussian)
    s.full_sampler = [d](const TwoModuleSystem& sys, std::size_t S, std::size_t burn_in, std::size_t thin,
                         std::uint64_t seed) { return detail::re_collapsed_full(d, sys, S, burn_in, thin, seed); };
  s.label = loss.kind == ReLoss::Kind::tukey ? "re-tukey" : "re-gaussian";
  return s;
}

/// Mask selecting the beta coordinates (psi held fixed) for calibration.
inline std::vector<std::size_t> re_beta_mask(const ReData& d) {
  std::vector<std::size_t> m(d.groups());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = i;
  return m;
}

/// Groups for the Bayesian bootstrap: observation i is group i, its atoms
/// are the J replicates Y_i1..Y_iJ.
inline GroupedData re_grouped_data(const ReData& d, const ReLoss& loss = ReLoss::gaussian()) {
  GroupedData g;
  const auto N = static_cast<Eigen::Index>(d.groups());
  const double J = static_cast<double>(d.replicates());
  for (std::size_t i = 0; i < d.groups(); ++i) g.group_of.push_back(i);
  g.group_size.assign(d.groups(), d.replicates());
  const Matrix Y = d.Y;
  g.reweighted_score = [Y, N, J, loss](std::size_t i, const std::vector<double>& wt, const Vector& eta,
                                       const Vector& phi) {
    const auto k = static_cast<Eigen::Index>(i);
    double wb = 0.0;
    for (Eigen::Index j = 0; j < Y.cols(); ++j) wb += wt[static_cast<std::size_t>(j)] * Y(k, j);
    const double s = phi[k] / std::sqrt(J);
    Vector out = Vector::Zero(N + 1);
    out[k] = -loss.rho1((wb - eta[k]) / s) / s;
    return out;
  };
  return g;
}

/// Log posterior from the raw observations under the Gaussian model; equals
/// the sufficient-statistic version up to a parameter-free constant.
inline double re_raw_log_posterior(const ReData& d, const Vector& phi, const Vector& eta) {
  const auto N = static_cast<Eigen::Index>(d.groups());
  if (phi.size() != N || eta.size() != N + 1) throw ConfigError("re raw posterior: wrong dimensions");
  if (!(phi.array() > 0.0).all() || !(eta[N] > 0.0)) return kNegInf;
  const LogPrior prior_eta = detail::re_eta_prior(N, static_cast<double>(d.replicates()));
  double lp = -phi.array().log().sum() + prior_eta(eta, phi);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < d.Y.cols(); ++j) {
      const double r = (d.Y(i, j) - eta[i]) / phi[i];
      lp += -half_log_2pi - std::log(phi[i]) - 0.5 * r * r;
    }
  return lp;
}

}  // namespace cutpost::models
