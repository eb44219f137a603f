#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "trtsmc/mdp.hpp"
#include "trtsmc/model.hpp"
#include "trtsmc/numerics.hpp"
#include "trtsmc/planner.hpp"
#include "trtsmc/random.hpp"
#include "trtsmc/trt.hpp"

namespace trtsmc {

struct TransitionRecord {
  StateId state = 0;
  ActionId action = 0;
  double reward = 0.0;
  std::vector<double> search_policy;  // planner root policy at `state`
  double inner_value = 0.0;           // planner value at `state`
  bool terminal = false;              // the transition ended the episode

  friend bool operator==(const TransitionRecord&, const TransitionRecord&) = default;
};

struct Segment {
  std::vector<TransitionRecord> records;
  StateId final_state = 0;
  double bootstrap_value = 0.0;  // planner value at final_state, 0 if terminal
};

namespace detail {

inline constexpr std::uint64_t kPlanLane = 0;
inline constexpr std::uint64_t kActLane = 1;

}  // namespace detail

/// Model-predictive control for up to `horizon` environment steps from s0:
/// plan, sample the action from the search policy, step the environment.
inline Segment collect_segment(const TabularMdp& mdp, const Model& model, const PlannerConfig& planner_config,
                               std::size_t horizon, std::uint64_t seed, StateId s0 = 0) {
  detail::require(horizon >= 1, "collect_segment: horizon must be >= 1");
  const ModelGuide guide(mdp, model, planner_config.temperature);
  Segment seg;
  StateId s = s0;
  for (std::size_t t = 0; t < horizon; ++t) {
    const PlannerOutput plan = run_planner(mdp, s, guide, planner_config, derive_seed(seed, t, detail::kPlanLane));
    RandomStream rng(derive_seed(seed, t, detail::kActLane), 0);
    const ActionId a = sample_categorical(plan.root_policy, rng);
    const StepResult next = step(mdp, s, a, rng);
    seg.records.push_back({s, a, next.reward, plan.root_policy, plan.root_value, next.terminal});
    s = next.next;
    if (next.terminal) break;
  }
  seg.final_state = s;
  if (!mdp.terminal(s)) {
    seg.bootstrap_value =
        run_planner(mdp, s, guide, planner_config, derive_seed(seed, horizon, detail::kPlanLane)).root_value;
  }
  return seg;
}

/// Truncated TD(lambda) targets bootstrapped from the planner values:
/// G_t = r_t + gamma [(1 - lambda) V'_{t+1} + lambda G_{t+1}], with 0 after a
/// terminal transition and `bootstrap` after the last non-terminal one.
inline std::vector<double> outer_targets(std::span<const TransitionRecord> records, double gamma, double lambda,
                                         double bootstrap = 0.0) {
  detail::require(!records.empty(), "outer_targets: empty segment");
  std::vector<double> g(records.size());
  double next_g = bootstrap, next_v = bootstrap;
  for (std::size_t t = records.size(); t-- > 0;) {
    const auto& r = records[t];
    if (r.terminal) {
      g[t] = r.reward;
    } else {
      g[t] = r.reward + gamma * ((1.0 - lambda) * next_v + lambda * next_g);
    }
    next_g = g[t];
    next_v = r.inner_value;
  }
  return g;
}

struct TrainingSample {
  TransitionRecord record;
  double target = 0.0;
};

/// Uniform circular buffer with FIFO eviction.
class ReplayBuffer {
public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    detail::require(capacity >= 1, "ReplayBuffer: capacity must be >= 1");
  }

  void push(TrainingSample sample) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(sample));
  }

  std::size_t size() const noexcept { return items_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return items_.empty(); }
  const TrainingSample& operator[](std::size_t i) const { return items_[i]; }

  template <class Rng>
  std::vector<TrainingSample> sample(std::size_t n, Rng& rng) const {
    detail::require(!items_.empty(), "ReplayBuffer::sample: buffer is empty");
    std::vector<TrainingSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto idx = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(items_.size()));
      out.push_back(items_[std::min(idx, items_.size() - 1)]);
    }
    return out;
  }

private:
  std::size_t capacity_;
  std::deque<TrainingSample> items_;
};

struct LossConfig {
  double c_v = 1.0;
  double c_pi = 1.0;
  double c_ent = 0.01;
  double lambda_outer = 0.9;
  double gamma_outer = 0.9;
  double lr = 0.1;
  double clip_abs = 10.0;
  double clip_norm = 10.0;

  void validate() const {
    for (double v : {c_v, c_pi, c_ent, lambda_outer, gamma_outer, lr, clip_abs, clip_norm})
      detail::require(v >= 0.0 && std::isfinite(v), "LossConfig: all coefficients must be finite and non-negative");
  }
};

/// Mean over the batch of
///   c_v/2 (G - V(s))^2 + c_v/2 (G - Q(s,a))^2 - c_pi sum_a q(a) log pi(a|s) - c_ent H[pi(.|s)].
inline double loss(const Model& model, std::span<const TrainingSample> batch, const LossConfig& cfg) {
  detail::require(!batch.empty(), "loss: empty batch");
  double total = 0.0;
  for (const auto& [rec, target] : batch) {
    const auto pi = model.policy_row(rec.state);
    const double dv = target - model.v_table[rec.state];
    const double dq = target - model.q_table(rec.state, rec.action);
    double cross = 0.0;
    for (std::size_t a = 0; a < pi.size(); ++a)
      if (rec.search_policy[a] > 0.0) cross -= rec.search_policy[a] * std::log(pi[a]);
    total += 0.5 * cfg.c_v * (dv * dv + dq * dq) + cfg.c_pi * cross - cfg.c_ent * entropy(pi);
  }
  return total / static_cast<double>(batch.size());
}

/// Analytic gradient of loss(). For logits z with pi = softmax(z):
///   d CE / dz = pi - q,   d(-H) / dz_k = pi_k (log pi_k + H).
inline ModelGrad grad(const Model& model, std::span<const TrainingSample> batch, const LossConfig& cfg) {
  detail::require(!batch.empty(), "grad: empty batch");
  ModelGrad g(model.n_states(), model.n_actions());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& [rec, target] : batch) {
    const StateId s = rec.state;
    const auto pi = model.policy_row(s);
    const double h = entropy(pi);
    g.v_table[s] += inv_n * cfg.c_v * (model.v_table[s] - target);
    g.q_table(s, rec.action) += inv_n * cfg.c_v * (model.q_table(s, rec.action) - target);
    for (std::size_t a = 0; a < pi.size(); ++a) {
      const double log_pi = pi[a] > 0.0 ? std::log(pi[a]) : 0.0;
      g.policy_logits(s, a) +=
          inv_n * (cfg.c_pi * (pi[a] - rec.search_policy[a]) + cfg.c_ent * pi[a] * (log_pi + h));
    }
  }
  return g;
}

namespace detail {

template <class F>
void for_each_parameter(Model& m, F&& f) {
  for (double& x : m.policy_logits.values()) f(x);
  for (double& x : m.v_table) f(x);
  for (double& x : m.q_table.values()) f(x);
}

}  // namespace detail

/// Element-wise clip to +-clip_abs, then rescale to global norm <= clip_norm,
/// then theta <- theta - lr * g.
inline Model sgd_step(Model model, ModelGrad grads, const LossConfig& cfg) {
  detail::require(grads.n_states() == model.n_states() && grads.n_actions() == model.n_actions(),
                  "sgd_step: gradient shape mismatch");
  double sq = 0.0;
  detail::for_each_parameter(grads, [&](double& x) {
    x = std::clamp(x, -cfg.clip_abs, cfg.clip_abs);
    sq += x * x;
  });
  const double norm = std::sqrt(sq);
  const double scale = norm > cfg.clip_norm && norm > 0.0 ? cfg.clip_norm / norm : 1.0;

  auto step_table = [&](std::vector<double>& theta, const std::vector<double>& g) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= cfg.lr * scale * g[i];
  };
  step_table(model.policy_logits.values(), grads.policy_logits.values());
  step_table(model.v_table, grads.v_table);
  step_table(model.q_table.values(), grads.q_table.values());
  return model;
}

// ---------------------------------------------------------------------------
// Outer loop

struct TrainConfig {
  PlannerConfig planner;
  LossConfig loss;
  std::size_t episode_horizon = 20;
  std::size_t buffer_capacity = 2000;
  std::size_t batch_size = 32;
  std::size_t updates_per_iteration = 4;
  std::size_t eval_horizon = 20;

  void validate() const {
    planner.validate();
    loss.validate();
    detail::require(episode_horizon >= 1, "TrainConfig: episode_horizon must be >= 1");
    detail::require(buffer_capacity >= 1, "TrainConfig: buffer_capacity must be >= 1");
    detail::require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    detail::require(eval_horizon >= 1, "TrainConfig: eval_horizon must be >= 1");
  }
};

struct IterationMetrics {
  double greedy_return = 0.0;  // exact return of argmax pi_theta from state 0
  double policy_return = 0.0;  // exact return of pi_theta itself
  double entropy = 0.0;        // mean H[pi_theta] over non-terminal states
};

inline PolicyTable greedy_policy(const Model& model) {
  PolicyTable out(model.n_states(), model.n_actions());
  for (StateId s = 0; s < model.n_states(); ++s) {
    const auto row = greedy_row(model.policy_logits.row(s));
    std::copy(row.begin(), row.end(), out.row(s).begin());
  }
  return out;
}

inline IterationMetrics evaluate_model(const TabularMdp& mdp, const Model& model, std::size_t horizon) {
  IterationMetrics m;
  m.greedy_return = evaluate_policy(mdp, greedy_policy(model), horizon)[0];
  const PolicyTable pi = model.policy();
  m.policy_return = evaluate_policy(mdp, pi, horizon)[0];
  std::size_t live = 0;
  for (StateId s = 0; s < mdp.n_states(); ++s) {
    if (mdp.terminal(s)) continue;
    m.entropy += entropy(pi.row(s));
    ++live;
  }
  if (live > 0) m.entropy /= static_cast<double>(live);
  return m;
}

/// Approximate policy iteration: each iteration collects one segment with the
/// planner on the live model, appends it with its TD(lambda) targets and runs
/// minibatch SGD on the buffer.
class Trainer {
public:
  Trainer(const TabularMdp& mdp, TrainConfig config, std::uint64_t seed)
      : mdp_(mdp), config_(std::move(config)), seed_(seed), model_(mdp.n_states(), mdp.n_actions()),
        buffer_(config_.buffer_capacity) {
    config_.validate();
  }

  IterationMetrics iterate() {
    const std::uint64_t it_seed = derive_seed(seed_, iteration_);
    const Segment seg = collect_segment(mdp_, model_, config_.planner, config_.episode_horizon, it_seed);
    const auto targets =
        outer_targets(seg.records, config_.loss.gamma_outer, config_.loss.lambda_outer, seg.bootstrap_value);
    for (std::size_t t = 0; t < seg.records.size(); ++t) buffer_.push({seg.records[t], targets[t]});

    RandomStream rng(derive_seed(it_seed, 0, 2), 0);
    for (std::size_t u = 0; u < config_.updates_per_iteration; ++u) {
      const auto batch = buffer_.sample(config_.batch_size, rng);
      model_ = sgd_step(std::move(model_), grad(model_, batch, config_.loss), config_.loss);
    }
    ++iteration_;
    return evaluate_model(mdp_, model_, config_.eval_horizon);
  }

  const Model& model() const noexcept { return model_; }
  std::uint64_t iteration() const noexcept { return iteration_; }
  std::uint64_t seed() const noexcept { return seed_; }
  const ReplayBuffer& buffer() const noexcept { return buffer_; }

  /// Restores model and position; the buffer is not part of a checkpoint.
  void restore(Model model, std::uint64_t iteration) {
    detail::require(model.n_states() == mdp_.n_states() && model.n_actions() == mdp_.n_actions(),
                    "Trainer::restore: model shape mismatch");
    model_ = std::move(model);
    iteration_ = iteration;
  }

private:
  const TabularMdp& mdp_;
  TrainConfig config_;
  std::uint64_t seed_;
  std::uint64_t iteration_ = 0;
  Model model_;
  ReplayBuffer buffer_;
};

inline std::vector<IterationMetrics> train(const TabularMdp& mdp, const TrainConfig& config, std::size_t iterations,
                                           std::uint64_t seed) {
  detail::require(iterations >= 1, "train: iterations must be >= 1");
  Trainer trainer(mdp, config, seed);
  std::vector<IterationMetrics> curve;
  curve.reserve(iterations);
  for (std::size_t n = 0; n < iterations; ++n) curve.push_back(trainer.iterate());
  return curve;
}

}  // namespace trtsmc
