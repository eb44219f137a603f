#pragma once

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "trtsmc/mdp.hpp"
#include "trtsmc/model.hpp"
#include "trtsmc/numerics.hpp"
#include "trtsmc/random.hpp"
#include "trtsmc/soft_oracle.hpp"
#include "trtsmc/trt.hpp"

namespace trtsmc {

// ---------------------------------------------------------------------------
// Configuration

enum class ProposalMode { prior, trust_region };
enum class InferenceMode { dirac, message_passing };
enum class ResampleMode { baseline, revived };
/// How log E[exp V(S_{t+1})] enters the weights: V at the sampled next state,
/// or the exact expectation over the transition row.
enum class ValueExpectation { sampled, exact };

struct PlannerConfig {
  std::size_t k = 4;
  std::size_t depth = 4;
  std::size_t resample_period = 1;
  double alpha = 0.0;
  double temperature = 1.0;
  double lambda_smc = 0.95;
  double gamma = 1.0;
  double sigma = 0.0;
  ProposalMode proposal_mode = ProposalMode::prior;
  InferenceMode inference_mode = InferenceMode::dirac;
  ResampleMode resample_mode = ResampleMode::baseline;
  ValueExpectation value_expectation = ValueExpectation::sampled;
  std::size_t bootstrap_atoms = 0;  // 0: solve the trust region over all actions

  void validate() const {
    detail::require(k >= 1 && k < 0xFFFFFFFFu, "PlannerConfig: k must be in [1, 2^32-1)");
    detail::require(depth >= 1, "PlannerConfig: depth must be >= 1");
    detail::require(resample_period >= 1, "PlannerConfig: resample_period must be >= 1");
    detail::require(alpha >= 0.0 && alpha <= 1.0, "PlannerConfig: alpha must lie in [0,1]");
    detail::require(temperature > 0.0, "PlannerConfig: temperature must be positive");
    detail::require(lambda_smc >= 0.0 && lambda_smc <= 1.0, "PlannerConfig: lambda must lie in [0,1]");
    detail::require(gamma >= 0.0 && gamma <= 1.0, "PlannerConfig: gamma must lie in [0,1]");
    detail::require(sigma >= 0.0 && sigma <= 1.0, "PlannerConfig: sigma must lie in [0,1]");
  }
};

// ---------------------------------------------------------------------------
// What the planner needs from a model

/// prior(s): pi_theta(.|s); action_values(s): Q_theta(s,.) for twisting;
/// value(s): V_theta(s) in reward units (Retrace); soft_value(s, step): the
/// log-likelihood value used in the weights at planner step `step` (1-based,
/// step = depth + 1 is the bootstrap after the last transition).
template <class G>
concept PlannerGuide = requires(const G& g, StateId s, std::size_t step) {
  { g.prior(s) } -> std::convertible_to<std::span<const double>>;
  { g.action_values(s) } -> std::convertible_to<std::span<const double>>;
  { g.value(s) } -> std::convertible_to<double>;
  { g.soft_value(s, step) } -> std::convertible_to<double>;
};

/// Guide backed by a tabular Model. Terminal states are absorbing with zero
/// reward, so their values are exactly 0 regardless of the table.
class ModelGuide {
public:
  ModelGuide(const TabularMdp& mdp, const Model& model, double temperature)
      : mdp_(&mdp), model_(&model), policy_(model.policy()), temperature_(temperature) {
    detail::require(model.n_states() == mdp.n_states() && model.n_actions() == mdp.n_actions(),
                    "ModelGuide: model shape does not match the MDP");
    detail::require(temperature > 0.0, "ModelGuide: temperature must be positive");
  }

  std::span<const double> prior(StateId s) const { return policy_.row(s); }
  std::span<const double> action_values(StateId s) const { return model_->q_table.row(s); }
  double value(StateId s) const { return mdp_->terminal(s) ? 0.0 : model_->v_table[s]; }
  double soft_value(StateId s, std::size_t) const { return value(s) / temperature_; }

private:
  const TabularMdp* mdp_;
  const Model* model_;
  PolicyTable policy_;
  double temperature_;
};

/// Guide carrying exact stage-dependent soft values from the oracle, with
/// zero Q and V. soft_value at step t uses the stage with depth - t + 1
/// steps remaining and 0 past the horizon.
class ExactSoftGuide {
public:
  ExactSoftGuide(PolicyTable prior, const std::vector<SoftSolution>& stages)
      : prior_(std::move(prior)), zeros_(prior_.cols(), 0.0) {
    for (const auto& st : stages) values_.push_back(st.v_soft);
  }

  std::span<const double> prior(StateId s) const { return prior_.row(s); }
  std::span<const double> action_values(StateId) const { return zeros_; }
  double value(StateId) const { return 0.0; }
  double soft_value(StateId s, std::size_t step) const {
    return step >= 1 && step <= values_.size() ? values_[step - 1][s] : 0.0;
  }

private:
  PolicyTable prior_;
  std::vector<std::vector<double>> values_;
  std::vector<double> zeros_;
};

// ---------------------------------------------------------------------------
// Particle state

struct ParticleSet {
  std::vector<StateId> states;
  std::vector<double> log_weights;
  std::vector<std::size_t> ancestors;  // root-ancestor id per particle
  std::vector<ActionId> root_actions;  // per root ancestor, written at step 1
  std::vector<StateId> ref_states;     // last non-terminal state per particle
  std::vector<double> ancestor_logq;   // per root ancestor
  std::vector<double> retrace_sum;     // per particle
  std::vector<double> retrace_trace;   // per particle, coefficient of the latest TD error

  std::size_t size() const noexcept { return states.size(); }

  std::vector<double> normalized_weights() const {
    const double z = log_sum_exp(log_weights);
    if (!std::isfinite(z)) throw DegenerateWeights("particle weights cannot be normalized");
    std::vector<double> out(log_weights.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(log_weights[i] - z);
    return out;
  }

  std::size_t distinct_ancestors() const {
    std::vector<char> seen(size(), 0);
    std::size_t n = 0;
    for (std::size_t j : ancestors)
      if (!seen[j]) {
        seen[j] = 1;
        ++n;
      }
    return n;
  }
};

inline ParticleSet init_particles(StateId s0, std::size_t k) {
  detail::require(k >= 1, "init_particles: k must be >= 1");
  ParticleSet p;
  p.states.assign(k, s0);
  p.log_weights.assign(k, 0.0);
  p.ancestors.resize(k);
  for (std::size_t i = 0; i < k; ++i) p.ancestors[i] = i;
  p.root_actions.assign(k, 0);
  p.ref_states.assign(k, s0);
  p.ancestor_logq.assign(k, 0.0);
  p.retrace_sum.assign(k, 0.0);
  p.retrace_trace.assign(k, 1.0);
  return p;
}

inline ParticleSet init_particles(StateId s0, const PlannerConfig& config) { return init_particles(s0, config.k); }

/// log w_t = log w_{t-1} + log(prior/proposal) + R/T + gamma * v_next - v_cur.
inline double weight_update(double log_w_prev, double prior_logp, double proposal_logp, double reward, double v_next,
                            double v_cur, double temperature, double gamma) {
  const double out = log_w_prev + (prior_logp - proposal_logp) + reward / temperature + gamma * v_next - v_cur;
  if (!std::isfinite(out)) throw NumericalError("weight_update: non-finite log-weight");
  return out;
}

namespace detail {

inline constexpr std::uint64_t kResampleLane = 0xFFFFFFFFu;

inline std::uint64_t particle_stream(std::size_t step, std::size_t particle) {
  return (static_cast<std::uint64_t>(step) << 32) | static_cast<std::uint64_t>(particle);
}

}  // namespace detail

/// Per-particle proposal rows for the current particle states.
template <PlannerGuide Guide>
Table build_proposals(const ParticleSet& particles, const Guide& guide, const PlannerConfig& config,
                      std::size_t n_actions, std::size_t step, std::uint64_t seed) {
  Table rows(particles.size(), n_actions);
  for (std::size_t i = 0; i < particles.size(); ++i) {
    const StateId s = particles.states[i];
    const auto prior = guide.prior(s);
    std::vector<double> q;
    if (config.proposal_mode == ProposalMode::prior || config.alpha == 0.0) {
      q.assign(prior.begin(), prior.end());
    } else if (config.bootstrap_atoms > 0) {
      // Atoms come from a lane of the particle's stream disjoint from the
      // action/transition draws of advance().
      RandomStream rng(seed, detail::particle_stream(step, i), std::uint64_t{1} << 40);
      q = solve_trust_region_sampled(prior, guide.action_values(s), config.alpha, config.bootstrap_atoms, rng).q;
    } else {
      const auto qv = guide.action_values(s);
      q = solve_trust_region(prior, qv, adaptive_epsilon(prior, qv, config.alpha)).q;
    }
    std::copy(q.begin(), q.end(), rows.row(i).begin());
  }
  return rows;
}

/// One planner transition for all particles (`step` is 1-based). Samples
/// actions and next states from per-particle streams, updates weights,
/// reference states, Retrace accumulators and per-ancestor statistics.
template <PlannerGuide Guide>
ParticleSet advance(ParticleSet particles, const TabularMdp& mdp, const Table& proposals, const Guide& guide,
                    const PlannerConfig& config, std::size_t step, std::uint64_t seed) {
  const std::size_t k = particles.size();
  detail::require(proposals.rows() == k && proposals.cols() == mdp.n_actions(), "advance: proposal shape");
  std::vector<double> log_ratio(k);
  std::vector<double> terms(mdp.n_states());
  for (std::size_t i = 0; i < k; ++i) {
    RandomStream rng(seed, detail::particle_stream(step, i));
    const StateId s = particles.states[i];
    const auto q_row = proposals.row(i);
    detail::require(is_distribution(q_row, 1e-9), "advance: proposal row is not a distribution");
    const ActionId a = sample_categorical(q_row, rng);
    if (step == 1) particles.root_actions[particles.ancestors[i]] = a;
    const StepResult next = trtsmc::step(mdp, s, a, rng);

    const double prior_p = guide.prior(s)[a];
    const double prior_logp = safe_log(prior_p);
    const double proposal_logp = std::log(q_row[a]);
    double v_next;
    if (config.value_expectation == ValueExpectation::exact) {
      const auto row = mdp.transition_row(s, a);
      for (StateId x = 0; x < mdp.n_states(); ++x) terms[x] = safe_log(row[x]) + guide.soft_value(x, step + 1);
      v_next = log_sum_exp(terms);
    } else {
      v_next = guide.soft_value(next.next, step + 1);
    }
    const double prev = particles.log_weights[i];
    particles.log_weights[i] = weight_update(prev, prior_logp, proposal_logp, next.reward, v_next,
                                             guide.soft_value(s, step), config.temperature, config.gamma);
    log_ratio[i] = particles.log_weights[i] - prev;

    if (step > 1) particles.retrace_trace[i] *= config.gamma * config.lambda_smc * std::min(1.0, prior_p / q_row[a]);
    const double delta = next.reward + config.gamma * guide.value(next.next) - guide.value(s);
    particles.retrace_sum[i] += particles.retrace_trace[i] * delta;

    particles.states[i] = next.next;
    if (config.resample_mode == ResampleMode::revived && !next.terminal) particles.ref_states[i] = next.next;
    if (config.resample_mode == ResampleMode::baseline) particles.ref_states[i] = next.next;
  }
  particles.ancestor_logq = accumulate_ancestor_q(particles.ancestor_logq, particles.ancestors, log_ratio);
  return particles;
}

/// Multinomial resampling. Per-particle statistics are copied from the drawn
/// parents; in revived mode particles restart at the parent's last
/// non-terminal state. Weights are reset to 1. The per-ancestor record
/// (root actions and accumulated Q) is left untouched.
inline ParticleSet multinomial_resample(const ParticleSet& particles, std::uint64_t seed, std::size_t step,
                                        ResampleMode mode) {
  const double z = log_sum_exp(particles.log_weights);
  if (!std::isfinite(z)) throw DegenerateWeights("multinomial_resample: weights cannot be normalized");
  const std::size_t k = particles.size();
  std::vector<double> weights(k);
  for (std::size_t i = 0; i < k; ++i) weights[i] = std::exp(particles.log_weights[i] - z);

  RandomStream rng(seed, detail::particle_stream(step, detail::kResampleLane));
  const CategoricalSampler draw(weights);
  ParticleSet out = particles;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t parent = draw(rng);
    out.ancestors[i] = particles.ancestors[parent];
    out.states[i] = mode == ResampleMode::revived ? particles.ref_states[parent] : particles.states[parent];
    out.ref_states[i] = out.states[i];
    out.retrace_sum[i] = particles.retrace_sum[parent];
    out.retrace_trace[i] = particles.retrace_trace[parent];
  }
  std::fill(out.log_weights.begin(), out.log_weights.end(), 0.0);
  return out;
}

/// Normalized weights summed by each particle's root-ancestor action.
inline std::vector<double> dirac_policy(const ParticleSet& particles, std::size_t n_actions) {
  const auto w = particles.normalized_weights();
  std::vector<double> out(n_actions, 0.0);
  for (std::size_t i = 0; i < particles.size(); ++i) out.at(particles.root_actions[particles.ancestors[i]]) += w[i];
  return out;
}

// ---------------------------------------------------------------------------
// Full planner run

struct StepDiagnostics {
  std::size_t step = 0;
  double ess = 0.0;                     // before resampling
  std::size_t distinct_ancestors = 0;   // end of step
  std::size_t terminal_particles = 0;   // end of step
  bool resampled = false;
};

struct PlannerOutput {
  std::vector<double> root_policy;
  double root_value = 0.0;    // sigma-mixed value target
  double search_value = 0.0;  // Retrace estimate before mixing
  std::vector<ActionId> root_actions;
  std::vector<double> ancestor_logq;
  std::vector<StepDiagnostics> diagnostics;
};

inline double effective_sample_size(std::span<const double> normalized_weights) {
  double sq = 0.0;
  for (double w : normalized_weights) sq += w * w;
  return 1.0 / sq;
}

/// Step-wise driver; run_planner() runs it to completion. Exposed so tests
/// can inspect the particle set between steps.
template <PlannerGuide Guide>
class SmcPlanner {
public:
  SmcPlanner(const TabularMdp& mdp, const Guide& guide, PlannerConfig config, std::uint64_t seed)
      : mdp_(mdp), guide_(guide), config_(config), seed_(seed) {
    config_.validate();
  }

  void reset(StateId s0) {
    mdp_.check_state(s0);
    detail::require(!mdp_.terminal(s0), "run_planner: cannot plan from a terminal state");
    s0_ = s0;
    t_ = 0;
    particles_ = init_particles(s0, config_);
    diagnostics_.clear();
  }

  bool done() const noexcept { return t_ >= config_.depth; }
  std::size_t steps_taken() const noexcept { return t_; }
  const ParticleSet& particles() const noexcept { return particles_; }
  const PlannerConfig& config() const noexcept { return config_; }

  /// Proposals, transition and per-ancestor accumulation for step t; then
  /// resampling when t is a multiple of the period, except at the last step
  /// whose weights feed the root estimates.
  void step() {
    detail::require(!done(), "SmcPlanner::step: already at full depth");
    ++t_;
    const Table proposals = build_proposals(particles_, guide_, config_, mdp_.n_actions(), t_, seed_);
    particles_ = advance(std::move(particles_), mdp_, proposals, guide_, config_, t_, seed_);
    StepDiagnostics d;
    d.step = t_;
    d.ess = effective_sample_size(particles_.normalized_weights());
    if (t_ % config_.resample_period == 0 && t_ < config_.depth) {
      particles_ = multinomial_resample(particles_, seed_, t_, config_.resample_mode);
      d.resampled = true;
    }
    d.distinct_ancestors = particles_.distinct_ancestors();
    for (StateId s : particles_.states) d.terminal_particles += mdp_.terminal(s);
    diagnostics_.push_back(d);
  }

  PlannerOutput finish() const {
    detail::require(done(), "SmcPlanner::finish: planner has not reached full depth");
    PlannerOutput out;
    out.root_policy = config_.inference_mode == InferenceMode::dirac
                          ? dirac_policy(particles_, mdp_.n_actions())
                          : message_passing_policy(guide_.prior(s0_), particles_.root_actions, particles_.ancestor_logq);
    const auto w = particles_.normalized_weights();
    const double v0 = guide_.value(s0_);
    double search = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) search += w[i] * (v0 + particles_.retrace_sum[i]);
    out.search_value = search;
    out.root_value = mix_value_target(v0, search, config_.sigma);
    out.root_actions = particles_.root_actions;
    out.ancestor_logq = particles_.ancestor_logq;
    out.diagnostics = diagnostics_;
    return out;
  }

private:
  const TabularMdp& mdp_;
  const Guide& guide_;
  PlannerConfig config_;
  std::uint64_t seed_;
  StateId s0_ = 0;
  std::size_t t_ = 0;
  ParticleSet particles_;
  std::vector<StepDiagnostics> diagnostics_;
};

template <PlannerGuide Guide>
PlannerOutput run_planner(const TabularMdp& mdp, StateId s0, const Guide& guide, const PlannerConfig& config,
                          std::uint64_t seed) {
  SmcPlanner<Guide> planner(mdp, guide, config, seed);
  planner.reset(s0);
  while (!planner.done()) planner.step();
  return planner.finish();
}

inline PlannerOutput run_planner(const TabularMdp& mdp, StateId s0, const Model& model, const PlannerConfig& config,
                                 std::uint64_t seed) {
  const ModelGuide guide(mdp, model, config.temperature);
  return run_planner(mdp, s0, guide, config, seed);
}

}  // namespace trtsmc
