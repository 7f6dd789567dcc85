#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "dysslu/error.hpp"
#include "dysslu/matrix.hpp"

namespace dysslu {

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

/// Capsule soft normalization: squash(s) = |s|^2 / (1 + |s|^2) * s / |s|.
/// The output keeps the direction of s with norm in [0, 1); squash(0) = 0.
inline void squash(std::span<const double> s, std::span<double> out) noexcept {
  const double n2 = squared_norm(s);
  if (n2 == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  const double n = std::sqrt(n2);
  const double scale = n / (1.0 + n2);  // == (n2 / (1 + n2)) / n
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = scale * s[i];
}

inline std::vector<double> squash(std::span<const double> s) {
  std::vector<double> out(s.size());
  squash(s, out);
  return out;
}

/// Vector-Jacobian product of squash: given s and dL/dv, writes dL/ds
/// (accumulated into grad_s).
///
/// With n = |s| and h(n) = n / (1 + n^2), v = h(n) s and
/// J = h I + h'(n)/n s s^T where h'(n) = (1 - n^2) / (1 + n^2)^2.
inline void squash_backward(std::span<const double> s, std::span<const double> grad_v,
                            std::span<double> grad_s) noexcept {
  const double n2 = squared_norm(s);
  if (n2 == 0.0) return;  // Jacobian vanishes at the origin
  const double n = std::sqrt(n2);
  const double h = n / (1.0 + n2);
  const double hp_over_n = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * n);
  const double sg = dot(s, grad_v);
  for (std::size_t i = 0; i < s.size(); ++i) grad_s[i] += h * grad_v[i] + hp_over_n * sg * s[i];
}

/// Logistic function, evaluated without overflow for large |x|.
inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Softmax with max-subtraction.
inline void softmax(std::span<const double> v, std::span<double> out) noexcept {
  const double m = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    sum += out[i];
  }
  const double inv = 1.0 / sum;
  for (double& x : out) x *= inv;
}

inline std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.size());
  softmax(v, out);
  return out;
}

/// dL/dz for p = softmax(z): p * (g - <p, g>), accumulated into grad_z.
inline void softmax_backward(std::span<const double> p, std::span<const double> grad_p,
                             std::span<double> grad_z) noexcept {
  const double pg = dot(p, grad_p);
  for (std::size_t i = 0; i < p.size(); ++i) grad_z[i] += p[i] * (grad_p[i] - pg);
}

/// Softmax cross entropy for one frame; writes
/// probabilities minus one-hot into grad (overwrites).
inline double cross_entropy_with_grad(std::span<const double> logits, std::size_t target,
                                      std::span<double> grad) noexcept {
  softmax(logits, grad);
  const double p = std::max(grad[target], std::numeric_limits<double>::min());
  grad[target] -= 1.0;
  return -std::log(p);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  ///< analytic value at worst_index
  double numeric = 0.0;   ///< central difference at worst_index
};

/// Compares an analytic gradient to central differences (f(θ+ε) − f(θ−ε)) / 2ε.
/// The per-parameter error is |a − n| / max(|a|, |n|, 1e-8); the maximum is returned
/// together with the offending index.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& loss_fn,
                                  std::span<const double> params,
                                  std::span<const double> analytic_grad, double epsilon) {
  if (params.size() != analytic_grad.size()) {
    throw ShapeError("grad_check: params and analytic gradient differ in length");
  }
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw InvalidArgument("grad_check: epsilon must lie in [1e-7, 1e-3]");
  }
  std::vector<double> theta(params.begin(), params.end());
  GradCheckResult result;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + epsilon;
    const double fp = loss_fn(theta);
    theta[i] = saved - epsilon;
    const double fm = loss_fn(theta);
    theta[i] = saved;
    const double numeric = (fp - fm) / (2.0 * epsilon);
    const double a = analytic_grad[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double err = std::abs(a - numeric) / denom;
    if (i == 0 || err > result.max_rel_error) result = {err, i, a, numeric};
  }
  return result;
}

}  // namespace dysslu
