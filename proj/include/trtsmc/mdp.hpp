#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "trtsmc/errors.hpp"
#include "trtsmc/random.hpp"
#include "trtsmc/table.hpp"

namespace trtsmc {

/// Finite MDP with explicit tensors. Terminal states are absorbing with zero
/// reward. Episodes start in state 0 by convention; discount is kept explicit
/// and never applied by step().
class TabularMdp {
public:
  static constexpr double kRowTolerance = 1e-12;

  /// transition is indexed [state][action][next], reward [state][action].
  /// Throws ContractViolation if any invariant fails.
  TabularMdp(std::size_t n_states, std::size_t n_actions, std::vector<double> transition,
             std::vector<double> reward, std::vector<bool> terminal, double discount)
      : n_states_(n_states),
        n_actions_(n_actions),
        transition_(std::move(transition)),
        reward_(std::move(reward)),
        terminal_(std::move(terminal)),
        discount_(discount) {
    validate();
  }

  std::size_t n_states() const noexcept { return n_states_; }
  std::size_t n_actions() const noexcept { return n_actions_; }
  double discount() const noexcept { return discount_; }

  double reward(StateId s, ActionId a) const { return reward_[s * n_actions_ + a]; }
  bool terminal(StateId s) const { return terminal_[s]; }
  double transition(StateId s, ActionId a, StateId next) const {
    return transition_[(s * n_actions_ + a) * n_states_ + next];
  }
  std::span<const double> transition_row(StateId s, ActionId a) const {
    return {transition_.data() + (s * n_actions_ + a) * n_states_, n_states_};
  }

  const std::vector<double>& transition_tensor() const noexcept { return transition_; }
  const std::vector<double>& reward_tensor() const noexcept { return reward_; }
  const std::vector<bool>& terminal_flags() const noexcept { return terminal_; }

  void check_state(StateId s) const {
    if (s >= n_states_) throw ContractViolation("state id " + std::to_string(s) + " out of range");
  }
  void check_action(ActionId a) const {
    if (a >= n_actions_) throw ContractViolation("action id " + std::to_string(a) + " out of range");
  }

  friend bool operator==(const TabularMdp&, const TabularMdp&) = default;

private:
  void validate() const {
    detail::require(n_states_ >= 1 && n_actions_ >= 1, "TabularMdp: need at least one state and one action");
    detail::require(transition_.size() == n_states_ * n_actions_ * n_states_, "TabularMdp: transition tensor shape");
    detail::require(reward_.size() == n_states_ * n_actions_, "TabularMdp: reward tensor shape");
    detail::require(terminal_.size() == n_states_, "TabularMdp: terminal vector shape");
    detail::require(discount_ >= 0.0 && discount_ <= 1.0, "TabularMdp: discount must lie in [0,1]");
    for (StateId s = 0; s < n_states_; ++s) {
      for (ActionId a = 0; a < n_actions_; ++a) {
        const auto where = "(" + std::to_string(s) + "," + std::to_string(a) + ")";
        double sum = 0.0;
        for (double p : transition_row(s, a)) {
          detail::require(p >= 0.0 && std::isfinite(p), "TabularMdp: invalid probability at " + where);
          sum += p;
        }
        detail::require(std::abs(sum - 1.0) <= kRowTolerance, "TabularMdp: transition row " + where + " does not sum to 1");
        detail::require(std::isfinite(reward(s, a)), "TabularMdp: non-finite reward at " + where);
        if (terminal_[s]) {
          detail::require(transition(s, a, s) == 1.0, "TabularMdp: terminal state " + std::to_string(s) + " is not absorbing");
          detail::require(reward(s, a) == 0.0, "TabularMdp: terminal state " + std::to_string(s) + " has non-zero reward");
        }
      }
    }
  }

  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> transition_;
  std::vector<double> reward_;
  std::vector<bool> terminal_;
  double discount_;
};

struct Trajectory {
  std::vector<StateId> states;   // length t + 1
  std::vector<ActionId> actions; // length t
  std::vector<double> rewards;   // length t

  std::size_t length() const noexcept { return actions.size(); }
  bool consistent() const noexcept {
    return states.size() == actions.size() + 1 && rewards.size() == actions.size();
  }
  /// sum_t gamma^(t-1) R_t
  double discounted_return(double gamma) const {
    double g = 0.0, scale = 1.0;
    for (double r : rewards) {
      g += scale * r;
      scale *= gamma;
    }
    return g;
  }
};

struct StepResult {
  StateId next;
  double reward;
  bool terminal;
};

template <class Rng>
StepResult step(const TabularMdp& mdp, StateId s, ActionId a, Rng& rng) {
  mdp.check_state(s);
  mdp.check_action(a);
  const StateId next = sample_categorical(mdp.transition_row(s, a), rng);
  return {next, mdp.reward(s, a), mdp.terminal(next)};
}

// ---------------------------------------------------------------------------
// Built-in environments

namespace detail {

struct MdpBuilder {
  std::size_t n_states, n_actions;
  std::vector<double> transition;
  std::vector<double> reward;
  std::vector<bool> terminal;

  MdpBuilder(std::size_t ns, std::size_t na)
      : n_states(ns), n_actions(na), transition(ns * na * ns, 0.0), reward(ns * na, 0.0), terminal(ns, false) {}

  void set(StateId s, ActionId a, StateId next, double r) {
    for (StateId x = 0; x < n_states; ++x) transition[(s * n_actions + a) * n_states + x] = 0.0;
    transition[(s * n_actions + a) * n_states + next] = 1.0;
    reward[s * n_actions + a] = r;
  }
  void make_terminal(StateId s) {
    terminal[s] = true;
    for (ActionId a = 0; a < n_actions; ++a) set(s, a, s, 0.0);
  }
  TabularMdp build(double discount) && {
    return TabularMdp(n_states, n_actions, std::move(transition), std::move(reward), std::move(terminal), discount);
  }
};

}  // namespace detail

/// s0 with two actions into a terminal state: a0 pays 0, a1 pays 1.
inline TabularMdp make_two_arm(double discount = 1.0) {
  detail::MdpBuilder b(2, 2);
  b.set(0, 0, 1, 0.0);
  b.set(0, 1, 1, 1.0);
  b.make_terminal(1);
  return std::move(b).build(discount);
}

/// States 0..n with n terminal. Action 0 moves left (reflecting at 0),
/// action 1 moves right; entering n pays goal_reward.
inline TabularMdp make_chain(std::size_t n, double goal_reward, double discount = 1.0) {
  detail::require(n >= 1, "make_chain: n must be >= 1");
  detail::MdpBuilder b(n + 1, 2);
  for (StateId s = 0; s < n; ++s) {
    b.set(s, 0, s == 0 ? 0 : s - 1, 0.0);
    b.set(s, 1, s + 1, s + 1 == n ? goal_reward : 0.0);
  }
  b.make_terminal(n);
  return std::move(b).build(discount);
}

/// One non-terminal state, every action loops back with zero reward.
inline TabularMdp make_absorbing_zero(std::size_t n_actions) {
  detail::require(n_actions >= 1, "make_absorbing_zero: n_actions must be >= 1");
  detail::MdpBuilder b(1, n_actions);
  for (ActionId a = 0; a < n_actions; ++a) b.set(0, a, 0, 0.0);
  return std::move(b).build(1.0);
}

struct Cell {
  std::size_t x, y;
};

/// w x h grid, state = y * w + x, start at (0,0), goal at (w-1,h-1).
/// Actions: 0 up, 1 down, 2 left, 3 right, clamped at the border. Entering
/// the goal pays 1; goal and trap cells are terminal.
inline TabularMdp make_gridworld(std::size_t w, std::size_t h, const std::vector<Cell>& traps, double discount = 1.0) {
  detail::require(w >= 1 && h >= 1, "make_gridworld: dimensions must be >= 1");
  detail::require(w * h >= 2, "make_gridworld: need distinct start and goal cells");
  const std::size_t n = w * h;
  const StateId goal = n - 1;
  std::vector<bool> trap(n, false);
  for (const Cell& c : traps) {
    detail::require(c.x < w && c.y < h, "make_gridworld: trap outside grid");
    const StateId s = c.y * w + c.x;
    detail::require(s != 0 && s != goal, "make_gridworld: trap on start or goal");
    trap[s] = true;
  }
  detail::MdpBuilder b(n, 4);
  for (StateId s = 0; s < n; ++s) {
    if (s == goal || trap[s]) continue;
    const std::size_t x = s % w, y = s / w;
    const std::array<StateId, 4> moves{(y > 0 ? y - 1 : y) * w + x, (y + 1 < h ? y + 1 : y) * w + x,
                                       y * w + (x > 0 ? x - 1 : x), y * w + (x + 1 < w ? x + 1 : x)};
    for (ActionId a = 0; a < 4; ++a) b.set(s, a, moves[a], moves[a] == goal ? 1.0 : 0.0);
  }
  b.make_terminal(goal);
  for (StateId s = 0; s < n; ++s)
    if (trap[s]) b.make_terminal(s);
  return std::move(b).build(discount);
}

/// Two non-terminal states and a terminal trap. Action 0 shuttles between
/// states 0 and 1 paying safe_reward; action 1 falls into the trap (state 2)
/// with zero reward.
inline TabularMdp make_trap(double safe_reward = 0.1, double discount = 1.0) {
  detail::MdpBuilder b(3, 2);
  b.set(0, 0, 1, safe_reward);
  b.set(1, 0, 0, safe_reward);
  b.set(0, 1, 2, 0.0);
  b.set(1, 1, 2, 0.0);
  b.make_terminal(2);
  return std::move(b).build(discount);
}

/// Dense random MDP without terminal states; rewards uniform in [0, 1).
inline TabularMdp make_random_mdp(std::size_t n_states, std::size_t n_actions, std::uint64_t seed,
                                  double discount = 1.0) {
  detail::require(n_states >= 1 && n_actions >= 1, "make_random_mdp: empty shape");
  RandomStream rng(seed, 0);
  std::vector<double> transition(n_states * n_actions * n_states);
  std::vector<double> reward(n_states * n_actions);
  for (std::size_t row = 0; row < n_states * n_actions; ++row) {
    double sum = 0.0;
    for (std::size_t x = 0; x < n_states; ++x) {
      const double w = 0.05 + rng.uniform();
      transition[row * n_states + x] = w;
      sum += w;
    }
    for (std::size_t x = 0; x < n_states; ++x) transition[row * n_states + x] /= sum;
    reward[row] = rng.uniform();
  }
  return TabularMdp(n_states, n_actions, std::move(transition), std::move(reward), std::vector<bool>(n_states, false),
                    discount);
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration

inline constexpr std::size_t kEnumerationBudget = 1'000'000;

struct WeightedTrajectory {
  Trajectory trajectory;
  double probability;
};

/// All depth-step trajectories from s0 with non-zero probability under a
/// stage-dependent policy (policy[t] is used at step t). Probabilities are
/// products of policy and transition terms.
inline std::vector<WeightedTrajectory> enumerate_trajectories(const TabularMdp& mdp, StateId s0,
                                                              const StagedPolicy& policy, std::size_t depth,
                                                              std::size_t budget = kEnumerationBudget) {
  mdp.check_state(s0);
  detail::require(depth >= 1, "enumerate_trajectories: depth must be >= 1");
  detail::require(policy.size() >= depth, "enumerate_trajectories: staged policy shorter than depth");
  for (const auto& p : policy)
    detail::require(p.rows() == mdp.n_states() && p.cols() == mdp.n_actions(), "enumerate_trajectories: policy shape");

  std::vector<WeightedTrajectory> out;
  Trajectory current;
  current.states.push_back(s0);

  std::function<void(std::size_t, double)> expand = [&](std::size_t t, double prob) {
    if (t == depth) {
      if (out.size() >= budget) throw BudgetExceeded("enumerate_trajectories: more than " + std::to_string(budget) + " trajectories");
      out.push_back({current, prob});
      return;
    }
    const StateId s = current.states.back();
    for (ActionId a = 0; a < mdp.n_actions(); ++a) {
      const double pa = policy[t](s, a);
      if (pa <= 0.0) continue;
      const auto row = mdp.transition_row(s, a);
      for (StateId next = 0; next < mdp.n_states(); ++next) {
        if (row[next] <= 0.0) continue;
        current.actions.push_back(a);
        current.rewards.push_back(mdp.reward(s, a));
        current.states.push_back(next);
        expand(t + 1, prob * pa * row[next]);
        current.states.pop_back();
        current.rewards.pop_back();
        current.actions.pop_back();
      }
    }
  };
  expand(0, 1.0);
  return out;
}

inline std::vector<WeightedTrajectory> enumerate_trajectories(const TabularMdp& mdp, StateId s0,
                                                              const PolicyTable& policy, std::size_t depth,
                                                              std::size_t budget = kEnumerationBudget) {
  return enumerate_trajectories(mdp, s0, StagedPolicy(depth, policy), depth, budget);
}

/// Exact expected discounted return of a stationary policy over `horizon`
/// steps, by backward recursion. Returns one value per start state.
inline std::vector<double> evaluate_policy(const TabularMdp& mdp, const PolicyTable& policy, std::size_t horizon,
                                           double gamma) {
  detail::require(policy.rows() == mdp.n_states() && policy.cols() == mdp.n_actions(), "evaluate_policy: policy shape");
  std::vector<double> v(mdp.n_states(), 0.0), next_v(mdp.n_states());
  for (std::size_t h = 0; h < horizon; ++h) {
    for (StateId s = 0; s < mdp.n_states(); ++s) {
      double acc = 0.0;
      for (ActionId a = 0; a < mdp.n_actions(); ++a) {
        const double pa = policy(s, a);
        if (pa == 0.0) continue;
        double cont = 0.0;
        const auto row = mdp.transition_row(s, a);
        for (StateId x = 0; x < mdp.n_states(); ++x) cont += row[x] * v[x];
        acc += pa * (mdp.reward(s, a) + gamma * cont);
      }
      next_v[s] = acc;
    }
    v.swap(next_v);
  }
  return v;
}

inline std::vector<double> evaluate_policy(const TabularMdp& mdp, const PolicyTable& policy, std::size_t horizon) {
  return evaluate_policy(mdp, policy, horizon, mdp.discount());
}

}  // namespace trtsmc
