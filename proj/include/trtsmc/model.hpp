#pragma once

#include <vector>

#include "trtsmc/numerics.hpp"
#include "trtsmc/table.hpp"

namespace trtsmc {

/// Tabular parametric model: policy logits (pi_theta via row softmax),
/// state values V_theta and state-action values Q_theta, in reward units.
struct Model {
  Table policy_logits;
  std::vector<double> v_table;
  Table q_table;

  Model() = default;
  Model(std::size_t n_states, std::size_t n_actions)
      : policy_logits(n_states, n_actions, 0.0), v_table(n_states, 0.0), q_table(n_states, n_actions, 0.0) {}

  std::size_t n_states() const noexcept { return v_table.size(); }
  std::size_t n_actions() const noexcept { return policy_logits.cols(); }

  std::vector<double> policy_row(StateId s) const { return softmax(policy_logits.row(s)); }

  PolicyTable policy() const {
    PolicyTable out(n_states(), n_actions());
    for (StateId s = 0; s < n_states(); ++s) {
      const auto row = policy_row(s);
      std::copy(row.begin(), row.end(), out.row(s).begin());
    }
    return out;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

/// Gradient or update with the same shape as Model.
using ModelGrad = Model;

}  // namespace trtsmc
