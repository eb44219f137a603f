#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "trtsmc/errors.hpp"

namespace trtsmc {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(sum(exp(x))). Handles -inf entries; returns -inf for an all -inf input.
inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return kNegInf;
  const double top = *std::max_element(x.begin(), x.end());
  if (top == kNegInf) return kNegInf;
  if (!std::isfinite(top)) return top;
  double acc = 0.0;
  for (double v : x) acc += std::exp(v - top);
  return top + std::log(acc);
}

inline double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double top = std::max(a, b);
  return top + std::log1p(std::exp(-std::abs(a - b)));
}

inline double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

/// Normalizes log-masses into a probability vector.
inline std::vector<double> softmax_from_log(std::span<const double> log_mass) {
  const double z = log_sum_exp(log_mass);
  if (!std::isfinite(z)) throw NumericalError("softmax_from_log: mass is not normalizable");
  std::vector<double> out(log_mass.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(log_mass[i] - z);
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) { return softmax_from_log(logits); }

/// KL(p || q). Terms with p = 0 vanish; q is floored at `q_floor` when positive.
inline double kl_divergence(std::span<const double> p, std::span<const double> q, double q_floor = 0.0) {
  detail::require(p.size() == q.size(), "kl_divergence: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    const double qi = std::max(q[i], q_floor);
    if (qi <= 0.0) return std::numeric_limits<double>::infinity();
    acc += p[i] * (std::log(p[i]) - std::log(qi));
  }
  return std::max(acc, 0.0);
}

inline double entropy(std::span<const double> p) {
  double acc = 0.0;
  for (double pi : p)
    if (pi > 0.0) acc -= pi * std::log(pi);
  return acc;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  detail::require(p.size() == q.size(), "total_variation: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

inline bool is_distribution(std::span<const double> p, double tol) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

}  // namespace trtsmc
