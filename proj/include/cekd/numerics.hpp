#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cekd/errors.hpp"
#include "cekd/rng.hpp"
#include "cekd/tensor.hpp"

namespace cekd {

/// softmax(logits / temperature), max-subtracted.
inline void softmax_into(std::span<const double> logits, double temperature,
                         std::span<double> out) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("softmax: temperature must be positive");
  if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - top) / temperature);
    total += out[i];
  }
  for (double& v : out.first(logits.size())) v /= total;
}

inline Tensor softmax(const Tensor& logits, double temperature = 1.0) {
  Tensor out(logits.shape());
  softmax_into(logits.values(), temperature, out.values());
  return out;
}

/// log softmax(logits / temperature), computed without forming exp overflow.
inline void log_softmax_into(std::span<const double> logits, double temperature,
                             std::span<double> out) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("log_softmax: temperature must be positive");
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp((l - top) / temperature);
  const double log_total = std::log(total);
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = (logits[i] - top) / temperature - log_total;
}

/// KL(p || q) = sum p ln(p/q), natural log. Terms with p_i == 0 contribute 0.
/// Returns +infinity when q_i == 0 for some p_i > 0.
inline double kl_div(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_div: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    total += p[i] * std::log(p[i] / q[i]);
  }
  return total;
}

inline double kl_div(const Tensor& p, const Tensor& q) {
  p.require_same_shape(q, "kl_div");
  return kl_div(p.values(), q.values());
}

/// Gamma(shape, 1) by Marsaglia-Tsang; shapes below one use the
/// Gamma(shape + 1) * U^(1/shape) boost.
inline double sample_gamma(double shape, RngStream& rng) {
  if (!(shape > 0.0)) throw std::invalid_argument("sample_gamma: shape must be positive");
  if (shape < 1.0) {
    const double g = sample_gamma(shape + 1.0, rng);
    const double u = 1.0 - rng.uniform();
    return g * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = 1.0 - rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

/// Draw from Beta(alpha, alpha) as G1 / (G1 + G2).
inline double sample_beta(double alpha, RngStream& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("sample_beta: alpha must be positive");
  const double a = sample_gamma(alpha, rng);
  const double b = sample_gamma(alpha, rng);
  const double total = a + b;
  // Both gammas can underflow for tiny alpha; the limit law is a fair coin
  // on {0, 1}.
  if (total <= 0.0) return rng.uniform() < 0.5 ? 0.0 : 1.0;
  return std::clamp(a / total, 0.0, 1.0);
}

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central difference (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for the
/// listed coordinates; the remaining entries of the result are zero.
inline Tensor finite_diff_gradient(const ScalarFunction& f, const Tensor& params,
                                   double eps,
                                   std::span<const std::size_t> coords) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw std::invalid_argument("finite_diff_gradient: eps must lie in [1e-7, 1e-3]");
  Tensor grad(params.shape());
  std::vector<double> probe(params.values().begin(), params.values().end());
  for (std::size_t i : coords) {
    if (i >= probe.size())
      throw std::invalid_argument("finite_diff_gradient: coordinate out of range");
    const double base = probe[i];
    probe[i] = base + eps;
    const double up = f(probe);
    probe[i] = base - eps;
    const double down = f(probe);
    probe[i] = base;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_gradient: non-finite value at coordinate " +
                             std::to_string(i),
                         i);
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

inline Tensor finite_diff_gradient(const ScalarFunction& f, const Tensor& params,
                                   double eps) {
  std::vector<std::size_t> all(params.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return finite_diff_gradient(f, params, eps, all);
}

/// |a - b| / max(|a|, |b|), or the absolute difference when both are below
/// `abs_floor`.
inline double gradient_error(double analytic, double numeric, double abs_floor = 1e-8) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double diff = std::abs(analytic - numeric);
  if (std::abs(analytic) < abs_floor) return diff <= abs_floor ? 0.0 : diff / scale;
  return diff / scale;
}

}  // namespace cekd
