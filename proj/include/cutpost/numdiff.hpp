#pragma once

// Central finite differences used whenever a loss or prior does not supply
// analytic derivatives.

#include <algorithm>
#include <cmath>
#include <limits>

#include "cutpost/types.hpp"

namespace cutpost::numdiff {

/// First-derivative step: cbrt(eps) * max(1, |x|).
inline double gradient_step(double x) {
  static const double base = std::cbrt(std::numeric_limits<double>::epsilon());
  return base * std::max(1.0, std::abs(x));
}

/// Second-derivative step from function values only: eps^(1/4) * max(1, |x|).
inline double hessian_step(double x) {
  static const double base = std::pow(std::numeric_limits<double>::epsilon(), 0.25);
  return base * std::max(1.0, std::abs(x));
}

template <class F>
Vector gradient(F&& f, const Vector& x) {
  Vector g(x.size());
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = gradient_step(x[i]);
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Jacobian of a vector-valued function; column j holds d out / d x_j.
template <class G>
Matrix jacobian(G&& g, const Vector& x, Eigen::Index out_dim) {
  Matrix jac(out_dim, x.size());
  Vector xp = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const double h = gradient_step(x[j]);
    xp[j] = x[j] + h;
    const Vector gp = g(xp);
    xp[j] = x[j] - h;
    const Vector gm = g(xp);
    xp[j] = x[j];
    jac.col(j) = (gp - gm) / (2.0 * h);
  }
  return jac;
}

/// Hessian from an analytic gradient, symmetrized.
template <class G>
Matrix hessian_from_gradient(G&& g, const Vector& x) {
  Matrix h = jacobian(std::forward<G>(g), x, x.size());
  return 0.5 * (h + h.transpose());
}

/// Hessian from function values (second central differences), symmetric by
/// construction.
template <class F>
Matrix hessian(F&& f, const Vector& x) {
  const Eigen::Index n = x.size();
  Matrix hm(n, n);
  Vector xp = x;
  const double f0 = f(x);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hi = hessian_step(x[i]);
    xp[i] = x[i] + hi;
    const double fp = f(xp);
    xp[i] = x[i] - hi;
    const double fm = f(xp);
    xp[i] = x[i];
    hm(i, i) = (fp - 2.0 * f0 + fm) / (hi * hi);
    for (Eigen::Index j = 0; j < i; ++j) {
      const double hj = hessian_step(x[j]);
      xp[i] = x[i] + hi;
      xp[j] = x[j] + hj;
      const double fpp = f(xp);
      xp[j] = x[j] - hj;
      const double fpm = f(xp);
      xp[i] = x[i] - hi;
      const double fmm = f(xp);
      xp[j] = x[j] + hj;
      const double fmp = f(xp);
      xp[i] = x[i];
      xp[j] = x[j];
      hm(i, j) = hm(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
    }
  }
  return hm;
}

}  // namespace cutpost::numdiff
