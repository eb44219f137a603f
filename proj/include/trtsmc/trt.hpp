#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "trtsmc/numerics.hpp"
#include "trtsmc/random.hpp"
#include "trtsmc/table.hpp"

// Extensions on top of the bootstrapped particle filter: trust-region
// twisted proposals, per-ancestor value accumulation with message-passing
// policy inference, and Retrace search values.

namespace trtsmc {

inline constexpr double kPriorFloor = 1e-12;

/// Uniform distribution over the argmax set of q_values.
inline std::vector<double> greedy_row(std::span<const double> q_values) {
  detail::require(!q_values.empty(), "greedy_row: empty input");
  const double top = *std::max_element(q_values.begin(), q_values.end());
  const double tol = 1e-12 * std::max(1.0, std::abs(top));
  std::vector<double> out(q_values.size(), 0.0);
  std::size_t ties = 0;
  for (double q : q_values) ties += (q >= top - tol);
  for (std::size_t a = 0; a < q_values.size(); ++a)
    if (q_values[a] >= top - tol) out[a] = 1.0 / static_cast<double>(ties);
  return out;
}

/// KL from the greedy policy to the floored prior; the radius at alpha = 1.
inline double greedy_kl(std::span<const double> prior_row, std::span<const double> q_values) {
  const auto greedy = greedy_row(q_values);
  return kl_divergence(greedy, prior_row, kPriorFloor);
}

/// eps_alpha = alpha * KL(greedy || prior).
inline double adaptive_epsilon(std::span<const double> prior_row, std::span<const double> q_values, double alpha) {
  detail::require(alpha >= 0.0 && alpha <= 1.0, "adaptive_epsilon: alpha must lie in [0,1]");
  detail::require(prior_row.size() == q_values.size(), "adaptive_epsilon: size mismatch");
  if (alpha == 0.0) return 0.0;
  return alpha * greedy_kl(prior_row, q_values);
}

struct TrustRegionSolution {
  std::vector<double> q;
  double beta = 0.0;         // inverse Lagrangian temperature; +inf when saturated
  double achieved_kl = 0.0;  // KL(q || prior)
  double epsilon = 0.0;
  bool saturated = false;    // radius covers the greedy policy
  int iterations = 0;
};

/// q_beta ∝ prior * exp(beta * Q), computed in log space.
inline std::vector<double> boltzmann_row(std::span<const double> prior_row, std::span<const double> q_values,
                                         double beta) {
  std::vector<double> logits(prior_row.size());
  for (std::size_t a = 0; a < logits.size(); ++a) logits[a] = safe_log(prior_row[a]) + beta * q_values[a];
  return softmax_from_log(logits);
}

struct BisectionOptions {
  double kl_tolerance = 1e-4;
  int max_iterations = 100;
  double beta_cap = 1e6;
};

/// Solves max_q E_q[Q] s.t. KL(q || prior) <= epsilon over the Boltzmann
/// family of the Lagrangian: find beta with KL(q_beta || prior) = epsilon by
/// bisection. The bracket starts at beta = 1 and doubles until it covers
/// epsilon or reaches the cap.
inline TrustRegionSolution solve_trust_region(std::span<const double> prior_row, std::span<const double> q_values,
                                              double epsilon, const BisectionOptions& opts = {}) {
  detail::require(prior_row.size() == q_values.size() && !prior_row.empty(), "solve_trust_region: size mismatch");
  detail::require(epsilon >= 0.0, "solve_trust_region: epsilon must be non-negative");
  TrustRegionSolution out;
  out.epsilon = epsilon;
  if (epsilon == 0.0) {
    out.q.assign(prior_row.begin(), prior_row.end());
    return out;
  }
  const double kl_greedy = greedy_kl(prior_row, q_values);
  if (epsilon >= kl_greedy) {
    out.q = greedy_row(q_values);
    out.beta = std::numeric_limits<double>::infinity();
    out.achieved_kl = kl_greedy;
    out.saturated = true;
    return out;
  }

  const auto kl_at = [&](double beta) { return kl_divergence(boltzmann_row(prior_row, q_values, beta), prior_row); };
  double lo = 0.0, hi = 1.0;
  while (kl_at(hi) < epsilon && hi < opts.beta_cap) hi = std::min(2.0 * hi, opts.beta_cap);

  double beta = hi;
  double kl = kl_at(hi);
  if (kl >= epsilon) {
    for (out.iterations = 0; out.iterations < opts.max_iterations; ++out.iterations) {
      beta = 0.5 * (lo + hi);
      kl = kl_at(beta);
      if (std::abs(kl - epsilon) <= opts.kl_tolerance) break;
      (kl < epsilon ? lo : hi) = beta;
    }
    // The last midpoint may sit just above the radius; fall back to the
    // feasible side of the bracket when that is closer to the constraint.
    if (kl > epsilon + opts.kl_tolerance) {
      beta = lo;
      kl = kl_at(lo);
    }
  }
  out.q = boltzmann_row(prior_row, q_values, beta);
  out.beta = beta;
  out.achieved_kl = kl;
  return out;
}

/// Atom-based variant: draws `atoms` actions from the prior and solves the
/// program against the empirical (uniformly bootstrapped) prior.
template <class Rng>
TrustRegionSolution solve_trust_region_sampled(std::span<const double> prior_row, std::span<const double> q_values,
                                               double alpha, std::size_t atoms, Rng& rng,
                                               const BisectionOptions& opts = {}) {
  detail::require(atoms >= 1, "solve_trust_region_sampled: need at least one atom");
  std::vector<double> empirical(prior_row.size(), 0.0);
  for (std::size_t b = 0; b < atoms; ++b) empirical[sample_categorical(prior_row, rng)] += 1.0;
  for (double& p : empirical) p /= static_cast<double>(atoms);
  return solve_trust_region(empirical, q_values, adaptive_epsilon(empirical, q_values, alpha), opts);
}

/// Adds, for every root ancestor j with surviving particles, the log of the
/// mean weight ratio over those particles. Ancestors without survivors are
/// left unchanged. Particles are reduced in index order.
inline std::vector<double> accumulate_ancestor_q(std::span<const double> ancestor_logq,
                                                 std::span<const std::size_t> ancestors,
                                                 std::span<const double> log_ratio) {
  const std::size_t k = ancestor_logq.size();
  detail::require(ancestors.size() == log_ratio.size(), "accumulate_ancestor_q: size mismatch");
  std::vector<double> top(k, kNegInf);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < ancestors.size(); ++i) {
    detail::require(ancestors[i] < k, "accumulate_ancestor_q: ancestor id out of range");
    top[ancestors[i]] = std::max(top[ancestors[i]], log_ratio[i]);
    ++count[ancestors[i]];
  }
  std::vector<double> sum(k, 0.0);
  for (std::size_t i = 0; i < ancestors.size(); ++i) {
    const std::size_t j = ancestors[i];
    if (std::isfinite(top[j])) sum[j] += std::exp(log_ratio[i] - top[j]);
  }
  std::vector<double> out(ancestor_logq.begin(), ancestor_logq.end());
  for (std::size_t j = 0; j < k; ++j) {
    if (count[j] == 0) continue;
    const double increment =
        std::isfinite(top[j]) ? top[j] + std::log(sum[j]) - std::log(static_cast<double>(count[j])) : top[j];
    out[j] += increment;
  }
  return out;
}

/// Root policy from per-ancestor statistics: action a receives
/// sum over root atoms j with action a of exp(Q_j). Q_j already carries the
/// root ratio prior/proposal and atoms are drawn from the proposal, so the
/// sum estimates prior(a) E[exp(...) | a]; weighting atoms by the prior
/// again would square it. Every atom contributes whether or not it still has
/// descendants; prior_row only fixes the action count and must put mass on
/// every sampled action.
inline std::vector<double> message_passing_policy(std::span<const double> prior_row,
                                                  std::span<const ActionId> root_actions,
                                                  std::span<const double> ancestor_logq) {
  detail::require(root_actions.size() == ancestor_logq.size(), "message_passing_policy: size mismatch");
  std::vector<double> log_mass(prior_row.size(), kNegInf);
  for (std::size_t j = 0; j < root_actions.size(); ++j) {
    const ActionId a = root_actions[j];
    detail::require(a < prior_row.size(), "message_passing_policy: root action out of range");
    detail::require(prior_row[a] > 0.0, "message_passing_policy: root atom outside the prior support");
    log_mass[a] = log_sum_exp(log_mass[a], ancestor_logq[j]);
  }
  return softmax_from_log(log_mass);
}

/// One step of a particle path as seen by Retrace.
struct RetraceStep {
  double reward;
  double is_ratio;    // prior(A|S) / proposal(A|S)
  double value_cur;   // V_theta(S_u)
  double value_next;  // V_theta(S_{u+1})
};

/// V(S_t) + sum_u gamma^(u-t) (prod_{v=t+1}^{u} c_v) delta_u with
/// c_v = lambda * min(1, rho_v) and delta_u = r_u + gamma V(S_{u+1}) - V(S_u).
inline double retrace_value(std::span<const RetraceStep> path, double lambda, double gamma) {
  detail::require(!path.empty(), "retrace_value: empty path");
  double value = path.front().value_cur;
  double trace = 1.0;
  for (std::size_t u = 0; u < path.size(); ++u) {
    if (u > 0) trace *= gamma * lambda * std::min(1.0, path[u].is_ratio);
    value += trace * (path[u].reward + gamma * path[u].value_next - path[u].value_cur);
  }
  return value;
}

/// Normalized-weight average of per-particle Retrace estimates.
inline double retrace_root_value(const std::vector<std::vector<RetraceStep>>& paths,
                                 std::span<const double> normalized_weights, double lambda, double gamma) {
  detail::require(paths.size() == normalized_weights.size(), "retrace_root_value: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < paths.size(); ++i) acc += normalized_weights[i] * retrace_value(paths[i], lambda, gamma);
  return acc;
}

inline double mix_value_target(double v_model, double v_smc, double sigma) {
  detail::require(sigma >= 0.0 && sigma <= 1.0, "mix_value_target: sigma must lie in [0,1]");
  return sigma * v_model + (1.0 - sigma) * v_smc;
}

}  // namespace trtsmc
