#pragma once

// Seeded random streams and the handful of distributions the samplers need.
// Every draw is derived from an explicit 64-bit seed; substreams are keyed by
// (seed, stream tag, index) so results never depend on scheduling.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "cutpost/types.hpp"

namespace cutpost {

using Rng = std::mt19937_64;

enum class Stream : std::uint64_t {
  phi = 1,
  eta = 2,
  spare_phi = 3,
  mcmc = 4,
  sir = 5,
  bootstrap = 6,
  credible = 7,
  simulate = 8,
  augment = 9,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t substream_seed(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
  return splitmix64(h ^ (index * 0xd1b54a32d192ed03ULL));
}

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(substream_seed(seed, stream, index)),
                    static_cast<std::uint32_t>(substream_seed(seed, stream, index) >> 32)};
  return Rng(seq);
}

inline Vector standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> z;
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = z(rng);
  return v;
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double gamma_draw(Rng& rng, double shape, double rate) {
  return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

inline double beta_draw(Rng& rng, double a, double b) {
  const double x = gamma_draw(rng, a, 1.0);
  const double y = gamma_draw(rng, b, 1.0);
  return x / (x + y);
}

/// Flat Dirichlet(alpha, ..., alpha) weights summing to one.
inline std::vector<double> dirichlet_draw(Rng& rng, std::size_t n, double alpha = 1.0) {
  std::vector<double> w(n);
  double total = 0.0;
  for (auto& x : w) {
    x = gamma_draw(rng, alpha, 1.0);
    total += x;
  }
  for (auto& x : w) x /= total;
  return w;
}

/// Draw from N(mean, L L^T) given the lower Cholesky factor L.
inline Vector mvn_draw(Rng& rng, const Vector& mean, const Matrix& chol_lower) {
  return mean + chol_lower * standard_normal(rng, mean.size());
}

/// Draw from a multivariate t with location `mean`, scale L L^T and `dof`
/// degrees of freedom.
inline Vector mvt_draw(Rng& rng, const Vector& mean, const Matrix& chol_lower, double dof) {
  const Vector z = standard_normal(rng, mean.size());
  const double chi2 = std::chi_squared_distribution<double>(dof)(rng);
  return mean + chol_lower * z * std::sqrt(dof / chi2);
}

/// log N(x; mean, L L^T).
inline double mvn_log_density(const Vector& x, const Vector& mean, const Matrix& chol_lower) {
  const auto d = static_cast<double>(x.size());
  const Vector u = chol_lower.triangularView<Eigen::Lower>().solve(x - mean);
  const double logdet = 2.0 * chol_lower.diagonal().array().log().sum();
  return -0.5 * (d * std::log(2.0 * std::numbers::pi) + logdet + u.squaredNorm());
}

/// log t_dof(x; mean, L L^T), normalized.
inline double mvt_log_density(const Vector& x, const Vector& mean, const Matrix& chol_lower,
                              double dof) {
  const auto d = static_cast<double>(x.size());
  const Vector u = chol_lower.triangularView<Eigen::Lower>().solve(x - mean);
  const double logdet = 2.0 * chol_lower.diagonal().array().log().sum();
  return std::lgamma(0.5 * (dof + d)) - std::lgamma(0.5 * dof) -
         0.5 * d * std::log(dof * std::numbers::pi) - 0.5 * logdet -
         0.5 * (dof + d) * std::log1p(u.squaredNorm() / dof);
}

}  // namespace cutpost
