#pragma once

#include <cmath>
#include <vector>

#include "trtsmc/mdp.hpp"
#include "trtsmc/numerics.hpp"
#include "trtsmc/table.hpp"

// Exact control-as-inference quantities on small tabular MDPs. Everything
// here is computed from full transition rows or full enumeration and serves
// as ground truth for the sampling-based planner.

namespace trtsmc {

struct SoftSolution {
  std::vector<double> v_soft;  // nats
  Table q_soft;                // [state, action], nats
  PolicyTable posterior_policy;
  double temperature = 1.0;
};

namespace detail {

inline void check_policy(const TabularMdp& mdp, const PolicyTable& p, const char* who) {
  require(p.rows() == mdp.n_states() && p.cols() == mdp.n_actions(), std::string(who) + ": policy shape mismatch");
  for (StateId s = 0; s < p.rows(); ++s)
    require(is_distribution(p.row(s), 1e-9), std::string(who) + ": policy row " + std::to_string(s) + " is not a distribution");
}

/// One backward stage: q = reward_scale * R + continuation * log E exp v_next,
/// v = log sum prior exp q, posterior = prior exp(q - v).
inline SoftSolution soft_backup(const TabularMdp& mdp, const PolicyTable& prior, const std::vector<double>& v_next,
                                double reward_scale, double continuation, double temperature) {
  const std::size_t ns = mdp.n_states(), na = mdp.n_actions();
  SoftSolution out{std::vector<double>(ns), Table(ns, na), PolicyTable(ns, na), temperature};
  std::vector<double> terms(ns), logits(na);
  for (StateId s = 0; s < ns; ++s) {
    for (ActionId a = 0; a < na; ++a) {
      const auto row = mdp.transition_row(s, a);
      for (StateId x = 0; x < ns; ++x) terms[x] = safe_log(row[x]) + v_next[x];
      const double q = reward_scale * mdp.reward(s, a) + continuation * log_sum_exp(terms);
      if (!std::isfinite(q)) throw NumericalError("soft backup: non-finite Q at state " + std::to_string(s));
      out.q_soft(s, a) = q;
      logits[a] = safe_log(prior(s, a)) + q;
    }
    const double v = log_sum_exp(logits);
    if (!std::isfinite(v)) throw NumericalError("soft backup: non-finite V at state " + std::to_string(s));
    out.v_soft[s] = v;
    for (ActionId a = 0; a < na; ++a) out.posterior_policy(s, a) = std::exp(logits[a] - v);
  }
  return out;
}

}  // namespace detail

/// Finite-horizon soft Bellman recursion
///   Q(s,a) = R(s,a)/T + gamma * log E_{s'} exp V(s'),  V(s) = log sum_a prior(a|s) exp Q(s,a),
/// with V = 0 past the horizon. Element t of the result is the solution with
/// horizon - t steps remaining, so element 0 is the root stage.
inline std::vector<SoftSolution> soft_value_stages(const TabularMdp& mdp, const PolicyTable& prior,
                                                    std::size_t horizon, double temperature) {
  detail::require(horizon >= 1, "soft_value_iteration: horizon must be >= 1");
  detail::require(temperature > 0.0, "soft_value_iteration: temperature must be positive");
  detail::check_policy(mdp, prior, "soft_value_iteration");
  std::vector<SoftSolution> stages(horizon);
  std::vector<double> v_next(mdp.n_states(), 0.0);
  for (std::size_t h = horizon; h-- > 0;) {
    stages[h] = detail::soft_backup(mdp, prior, v_next, 1.0 / temperature, mdp.discount(), temperature);
    v_next = stages[h].v_soft;
  }
  return stages;
}

inline SoftSolution soft_value_iteration(const TabularMdp& mdp, const PolicyTable& prior, std::size_t horizon,
                                         double temperature) {
  return soft_value_stages(mdp, prior, horizon, temperature).front();
}

/// Stage-wise factorization of the trajectory posterior
///   p(H) ∝ p_prior(H) exp(sum_t gamma^(t-1) R_t / T).
/// Stage t scales rewards by gamma^t / T and carries the continuation without
/// an extra discount, so it matches exact_posterior_trajectories for any gamma;
/// for gamma = 1 it coincides with soft_value_stages.
inline std::vector<SoftSolution> posterior_stages(const TabularMdp& mdp, const PolicyTable& prior, std::size_t depth,
                                                  double temperature) {
  detail::require(depth >= 1, "posterior_stages: depth must be >= 1");
  detail::require(temperature > 0.0, "posterior_stages: temperature must be positive");
  detail::check_policy(mdp, prior, "posterior_stages");
  std::vector<SoftSolution> stages(depth);
  std::vector<double> v_next(mdp.n_states(), 0.0);
  for (std::size_t h = depth; h-- > 0;) {
    const double scale = std::pow(mdp.discount(), static_cast<double>(h)) / temperature;
    stages[h] = detail::soft_backup(mdp, prior, v_next, scale, 1.0, temperature);
    v_next = stages[h].v_soft;
  }
  return stages;
}

inline StagedPolicy staged_posterior_policy(const std::vector<SoftSolution>& stages) {
  StagedPolicy out;
  out.reserve(stages.size());
  for (const auto& st : stages) out.push_back(st.posterior_policy);
  return out;
}

/// Posterior over depth-step trajectories from s0 given the likelihood
/// exp(sum_t gamma^(t-1) R_t / T), by exhaustive enumeration under the prior.
inline std::vector<WeightedTrajectory> exact_posterior_trajectories(const TabularMdp& mdp, const PolicyTable& prior,
                                                                    StateId s0, std::size_t depth, double temperature) {
  detail::require(temperature > 0.0, "exact_posterior_trajectories: temperature must be positive");
  detail::check_policy(mdp, prior, "exact_posterior_trajectories");
  auto trajs = enumerate_trajectories(mdp, s0, prior, depth);
  std::vector<double> log_mass(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i)
    log_mass[i] = std::log(trajs[i].probability) + trajs[i].trajectory.discounted_return(mdp.discount()) / temperature;
  const double z = log_sum_exp(log_mass);
  for (std::size_t i = 0; i < trajs.size(); ++i) trajs[i].probability = std::exp(log_mass[i] - z);
  return trajs;
}

/// Distribution of the first action under a weighted trajectory list.
inline std::vector<double> root_action_marginal(const std::vector<WeightedTrajectory>& trajs, std::size_t n_actions) {
  std::vector<double> out(n_actions, 0.0);
  for (const auto& wt : trajs) out.at(wt.trajectory.actions.front()) += wt.probability;
  return out;
}

struct ElboDecomposition {
  double elbo;
  double gap;
  double log_evidence;
};

namespace detail {

inline double log_evidence(const TabularMdp& mdp, const PolicyTable& prior, StateId s0, std::size_t depth,
                           double temperature) {
  const auto trajs = enumerate_trajectories(mdp, s0, prior, depth);
  std::vector<double> log_joint(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i)
    log_joint[i] = std::log(trajs[i].probability) + trajs[i].trajectory.discounted_return(mdp.discount()) / temperature;
  return log_sum_exp(log_joint);
}

}  // namespace detail

/// log p(O) = E_q[sum_t gamma^(t-1) R_t / T - log q(H) / p_prior(H)] + KL(q(H) || p(H | O))
/// for a proposal given as a distribution over depth-step trajectories from
/// s0. The gap is computed from trajectory log-probabilities directly, not as
/// the difference of the other two terms.
inline ElboDecomposition elbo_and_gap(const TabularMdp& mdp, const std::vector<WeightedTrajectory>& proposal,
                                      const PolicyTable& prior, StateId s0, std::size_t depth, double temperature) {
  detail::require(temperature > 0.0, "elbo_and_gap: temperature must be positive");
  detail::check_policy(mdp, prior, "elbo_and_gap");
  const double log_evidence = detail::log_evidence(mdp, prior, s0, depth, temperature);

  double elbo = 0.0, gap = 0.0, total = 0.0;
  for (const auto& [traj, q_prob] : proposal) {
    detail::require(traj.consistent() && traj.length() == depth && traj.states.front() == s0,
                    "elbo_and_gap: proposal trajectory does not match s0 and depth");
    total += q_prob;
    if (q_prob <= 0.0) continue;
    double log_prior_path = 0.0;
    for (std::size_t t = 0; t < traj.length(); ++t) {
      const StateId s = traj.states[t];
      const ActionId a = traj.actions[t];
      const double p = prior(s, a) * mdp.transition(s, a, traj.states[t + 1]);
      if (p <= 0.0) throw SupportViolation("elbo_and_gap: proposal trajectory outside the prior support");
      log_prior_path += std::log(p);
    }
    const double scaled_return = traj.discounted_return(mdp.discount()) / temperature;
    const double log_q = std::log(q_prob);
    elbo += q_prob * (scaled_return - (log_q - log_prior_path));
    gap += q_prob * (log_q - (log_prior_path + scaled_return - log_evidence));
  }
  detail::require(std::abs(total - 1.0) <= 1e-9, "elbo_and_gap: proposal probabilities do not sum to 1");
  return {elbo, gap, log_evidence};
}

/// Stage-dependent policy proposal under the true dynamics. Such a proposal
/// reaches the trajectory posterior (gap 0) only when the dynamics are
/// deterministic: the posterior also tilts transitions towards high-value
/// successors.
inline ElboDecomposition elbo_and_gap(const TabularMdp& mdp, const StagedPolicy& proposal, const PolicyTable& prior,
                                      StateId s0, std::size_t depth, double temperature) {
  detail::check_policy(mdp, prior, "elbo_and_gap");
  detail::require(proposal.size() >= depth, "elbo_and_gap: staged proposal shorter than depth");
  for (std::size_t t = 0; t < depth; ++t) {
    detail::check_policy(mdp, proposal[t], "elbo_and_gap");
    for (StateId s = 0; s < mdp.n_states(); ++s)
      for (ActionId a = 0; a < mdp.n_actions(); ++a)
        if (proposal[t](s, a) > 0.0 && prior(s, a) <= 0.0)
          throw SupportViolation("elbo_and_gap: proposal has mass outside prior support at (" + std::to_string(s) +
                                 "," + std::to_string(a) + ")");
  }
  return elbo_and_gap(mdp, enumerate_trajectories(mdp, s0, proposal, depth), prior, s0, depth, temperature);
}

inline ElboDecomposition elbo_and_gap(const TabularMdp& mdp, const PolicyTable& proposal, const PolicyTable& prior,
                                      StateId s0, std::size_t depth, double temperature) {
  return elbo_and_gap(mdp, StagedPolicy(depth, proposal), prior, s0, depth, temperature);
}

struct OptimalSolution {
  PolicyTable policy;         // root-stage greedy policy, ties split uniformly
  std::vector<double> v_star; // root-stage optimal values
};

/// Standard finite-horizon value iteration on the unregularized MDP.
inline OptimalSolution optimal_policy(const TabularMdp& mdp, std::size_t horizon) {
  detail::require(horizon >= 1, "optimal_policy: horizon must be >= 1");
  const std::size_t ns = mdp.n_states(), na = mdp.n_actions();
  std::vector<double> v(ns, 0.0);
  Table q(ns, na);
  for (std::size_t h = 0; h < horizon; ++h) {
    std::vector<double> next(ns);
    for (StateId s = 0; s < ns; ++s) {
      double best = kNegInf;
      for (ActionId a = 0; a < na; ++a) {
        double cont = 0.0;
        const auto row = mdp.transition_row(s, a);
        for (StateId x = 0; x < ns; ++x) cont += row[x] * v[x];
        q(s, a) = mdp.reward(s, a) + mdp.discount() * cont;
        best = std::max(best, q(s, a));
      }
      next[s] = best;
    }
    v = std::move(next);
  }
  PolicyTable policy(ns, na, 0.0);
  for (StateId s = 0; s < ns; ++s) {
    const double tol = 1e-12 * std::max(1.0, std::abs(v[s]));
    std::size_t ties = 0;
    for (ActionId a = 0; a < na; ++a) ties += (q(s, a) >= v[s] - tol);
    for (ActionId a = 0; a < na; ++a)
      if (q(s, a) >= v[s] - tol) policy(s, a) = 1.0 / static_cast<double>(ties);
  }
  return {std::move(policy), std::move(v)};
}

}  // namespace trtsmc
