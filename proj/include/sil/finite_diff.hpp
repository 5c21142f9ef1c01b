#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

#include "sil/error.hpp"

namespace sil {

/// Central-difference gradient of a scalar function, evaluated in 64-bit:
/// g_i = (f(p + eps e_i) - f(p - eps e_i)) / (2 eps).
template <typename Fn>
Eigen::VectorXd finite_diff_grad(Fn&& f, const Eigen::VectorXd& p, double eps) {
  if (!(eps > 0)) throw ArgumentError("finite_diff_grad: eps must be positive");
  Eigen::VectorXd grad(p.size());
  Eigen::VectorXd probe = p;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    probe[i] = p[i] + eps;
    const double hi = f(static_cast<const Eigen::VectorXd&>(probe));
    probe[i] = p[i] - eps;
    const double lo = f(static_cast<const Eigen::VectorXd&>(probe));
    probe[i] = p[i];
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(i));
    grad[i] = (hi - lo) / (2.0 * eps);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// gradient is zero from dividing round-off by round-off.
inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace sil
