#pragma once

// HPV prevalence and cervical cancer incidence (13 countries).
//   module 1: z_i ~ Binomial(N_i, phi_i), phi_i ~ U(0, 1)
//   module 2: w_i ~ Poisson(T_i rho_i), log rho_i = eta_1 + eta_2 phi_i
// or a quasi-Poisson loss whose variance is lambda times the mean.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cutpost/core.hpp"
#include "cutpost/io/csv.hpp"
#include "cutpost/random.hpp"

namespace cutpost::models {

struct HpvData {
  std::vector<double> z;  // HPV-positive count
  std::vector<double> N;  // survey size
  std::vector<double> w;  // cancer cases
  std::vector<double> T;  // woman-years of follow-up (thousands)

  std::size_t size() const { return z.size(); }

  void validate() const {
    const std::size_t n = z.size();
    if (n == 0) throw ConfigError("hpv data: no countries");
    if (N.size() != n || w.size() != n || T.size() != n)
      throw ConfigError("hpv data: z, N, w, T must have equal length");
    for (std::size_t i = 0; i < n; ++i) {
      if (!(z[i] >= 0.0 && z[i] <= N[i]) || z[i] != std::floor(z[i]) || N[i] != std::floor(N[i]))
        throw ConfigError("hpv data: need integer counts 0 <= z_i <= N_i (row " + std::to_string(i + 1) + ")");
      if (!(w[i] >= 0.0) || w[i] != std::floor(w[i]))
        throw ConfigError("hpv data: w_i must be a non-negative integer (row " + std::to_string(i + 1) + ")");
      if (!(T[i] > 0.0) || !std::isfinite(T[i]))
        throw ConfigError("hpv data: T_i must be positive (row " + std::to_string(i + 1) + ")");
    }
  }
};

/// Settings of the HPV-shaped simulator. Survey sizes and follow-up match
/// the magnitudes of the original 13-country study.
struct HpvSimOptions {
  std::vector<double> N{111, 71, 162, 188, 145, 215, 166, 37, 173, 143, 229, 696, 93};
  std::vector<double> T{26.983, 250.930, 829.348, 157.775, 150.467, 352.445, 553.066,
                        26.751, 75.815,  150.302, 354.993, 3683.043, 507.218};
  std::vector<double> phi{0.063, 0.085, 0.062, 0.053, 0.010, 0.008, 0.060,
                          0.108, 0.200, 0.020, 0.044, 0.011, 0.043};
  double eta1 = -2.0;
  double eta2 = 13.0;
  /// Log-normal extra-Poisson noise on rho_i, making the Poisson model misspecified.
  double overdispersion_sd = 0.5;
};

inline HpvData hpv_simulate(std::uint64_t seed, const HpvSimOptions& opt = {}) {
  const std::size_t n = opt.N.size();
  if (opt.T.size() != n || opt.phi.size() != n) throw ConfigError("hpv simulator: N, T, phi must have equal length");
  Rng rng = make_rng(seed, Stream::simulate);
  std::normal_distribution<double> normal;
  HpvData d;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(opt.phi[i] >= 0.0 && opt.phi[i] <= 1.0)) throw ConfigError("hpv simulator: phi must lie in [0, 1]");
    std::binomial_distribution<long> bin(static_cast<long>(opt.N[i]), opt.phi[i]);
    const double log_rho = opt.eta1 + opt.eta2 * opt.phi[i] + opt.overdispersion_sd * normal(rng);
    std::poisson_distribution<long> pois(opt.T[i] * std::exp(log_rho));
    d.z.push_back(static_cast<double>(bin(rng)));
    d.N.push_back(opt.N[i]);
    d.w.push_back(static_cast<double>(pois(rng)));
    d.T.push_back(opt.T[i]);
  }
  return d;
}

/// Columns z, N, w, T; one row per country.
inline HpvData read_hpv_csv(const std::string& path) {
  const auto t = io::read_csv(path);
  const Matrix m = io::numeric_columns(t, {"z", "N", "w", "T"});
  HpvData d;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    d.z.push_back(m(i, 0));
    d.N.push_back(m(i, 1));
    d.w.push_back(m(i, 2));
    d.T.push_back(m(i, 3));
  }
  d.validate();
  return d;
}

inline void write_hpv_csv(const std::string& path, const HpvData& d) {
  Matrix m(static_cast<Eigen::Index>(d.size()), 4);
  for (std::size_t i = 0; i < d.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) << d.z[i], d.N[i], d.w[i], d.T[i];
  io::write_numeric_csv(path, {"z", "N", "w", "T"}, m);
}

struct HpvLoss {
  enum class Kind { poisson, quasi } kind = Kind::poisson;
  double lambda = 1.0;

  static HpvLoss poisson() { return {}; }
  static HpvLoss quasi(double lambda) { return {Kind::quasi, lambda}; }
};

namespace detail {

inline LossModule hpv_binomial_module(const HpvData& d) {
  const auto n = static_cast<Eigen::Index>(d.size());
  LossModule m;
  m.wrt = Block::phi;
  m.n_obs = d.size();
  const std::vector<double> z = d.z, N = d.N;
  auto term = [z, N](std::size_t i, double p) {
    double v = 0.0;
    if (z[i] > 0) v -= z[i] * std::log(p);
    if (N[i] - z[i] > 0) v -= (N[i] - z[i]) * std::log1p(-p);
    return v;
  };
  m.loss = [term](std::size_t i, const Vector&, const Vector& phi) { return term(i, phi[static_cast<Eigen::Index>(i)]); };
  m.sum_loss = [term, n](const Vector&, const Vector& phi) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += term(static_cast<std::size_t>(i), phi[i]);
    return s;
  };
  auto g1 = [z, N](std::size_t i, double p) { return -z[i] / p + (N[i] - z[i]) / (1.0 - p); };
  auto h1 = [z, N](std::size_t i, double p) {
    return z[i] / (p * p) + (N[i] - z[i]) / ((1.0 - p) * (1.0 - p));
  };
  m.grad = [g1, n](std::size_t i, const Vector&, const Vector& phi) {
    Vector g = Vector::Zero(n);
    const auto k = static_cast<Eigen::Index>(i);
    g[k] = g1(i, phi[k]);
    return g;
  };
  m.hess = [h1, n](std::size_t i, const Vector&, const Vector& phi) {
    Matrix h = Matrix::Zero(n, n);
    const auto k = static_cast<Eigen::Index>(i);
    h(k, k) = h1(i, phi[k]);
    return h;
  };
  m.sum_grad = [g1, n](const Vector&, const Vector& phi) {
    Vector g(n);
    for (Eigen::Index k = 0; k < n; ++k) g[k] = g1(static_cast<std::size_t>(k), phi[k]);
    return g;
  };
  m.sum_hess = [h1, n](const Vector&, const Vector& phi) {
    Vector h(n);
    for (Eigen::Index k = 0; k < n; ++k) h[k] = h1(static_cast<std::size_t>(k), phi[k]);
    return Matrix(h.asDiagonal());
  };
  return m;
}

// Poisson negative log-likelihood in eta, scaled by 1/lambda.
inline LossModule hpv_poisson_module(const HpvData& d, double scale) {
  LossModule m;
  m.wrt = Block::eta;
  m.n_obs = d.size();
  const std::vector<double> w = d.w, T = d.T;
  std::vector<double> lgw;
  for (double x : w) lgw.push_back(std::lgamma(x + 1.0));
  auto mu = [T](std::size_t i, const Vector& eta, const Vector& phi) {
    return T[i] * std::exp(eta[0] + eta[1] * phi[static_cast<Eigen::Index>(i)]);
  };
  m.loss = [=](std::size_t i, const Vector& eta, const Vector& phi) {
    const double lin = eta[0] + eta[1] * phi[static_cast<Eigen::Index>(i)];
    return scale * (mu(i, eta, phi) - w[i] * (std::log(T[i]) + lin) + lgw[i]);
  };
  m.grad = [=](std::size_t i, const Vector& eta, const Vector& phi) {
    const double r = mu(i, eta, phi) - w[i];
    const double p = phi[static_cast<Eigen::Index>(i)];
    Vector g(2);
    g << scale * r, scale * r * p;
    return g;
  };
  m.hess = [=](std::size_t i, const Vector& eta, const Vector& phi) {
    const double u = scale * mu(i, eta, phi);
    const double p = phi[static_cast<Eigen::Index>(i)];
    Matrix h(2, 2);
    h << u, u * p, u * p, u * p * p;
    return h;
  };
  return m;
}

}  // namespace detail

/// The HPV two-module system. eta has an independent N(0, 1000) prior.
inline TwoModuleSystem hpv_system(const HpvData& d, const HpvLoss& loss = HpvLoss::poisson()) {
  d.validate();
  if (loss.kind == HpvLoss::Kind::quasi && !(loss.lambda > 0.0 && std::isfinite(loss.lambda)))
    throw ConfigError("hpv quasi-likelihood: lambda must be > 0");
  const auto n = static_cast<Eigen::Index>(d.size());
  TwoModuleSystem s;
  for (Eigen::Index i = 0; i < n; ++i) s.phi_names.push_back("phi" + std::to_string(i + 1));
  s.eta_names = {"eta1", "eta2"};
  s.module1 = detail::hpv_binomial_module(d);
  s.module2 = detail::hpv_poisson_module(d, loss.kind == HpvLoss::Kind::quasi ? 1.0 / loss.lambda : 1.0);
  s.prior_phi = box_prior(Block::phi, Vector::Zero(n), Vector::Ones(n));
  s.prior_eta = independent_normal_prior(Block::eta, Vector::Zero(2), Vector::Constant(2, std::sqrt(1000.0)));
  // Cut marginal: independent Beta(nu z_i + 1, nu (N_i - z_i) + 1).
  std::vector<double> a, b;
  for (std::size_t i = 0; i < d.size(); ++i) {
    a.push_back(d.z[i] + 1.0);
    b.push_back(d.N[i] - d.z[i] + 1.0);
  }
  s.phi_sampler = [a, b](Rng& rng, double nu) {
    Vector p(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
      p[static_cast<Eigen::Index>(i)] = beta_draw(rng, nu * (a[i] - 1.0) + 1.0, nu * (b[i] - 1.0) + 1.0);
    return p;
  };
  Vector init(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    init[i] = (d.z[k] + 1.0) / (d.N[k] + 2.0);
  }
  s.phi_init = init;
  double sw = 0.0, st = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    sw += d.w[i];
    st += d.T[i];
  }
  const double base = std::log(std::max(sw, 0.5) / st);
  s.eta_init = [base](const Vector&) {
    Vector e(2);
    e << base, 0.0;
    return e;
  };
  s.label = loss.kind == HpvLoss::Kind::quasi ? "hpv-quasi" : "hpv-poisson";
  return s;
}

}  // namespace cutpost::models
