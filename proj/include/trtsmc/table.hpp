#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "trtsmc/errors.hpp"

namespace trtsmc {

using StateId = std::size_t;
using ActionId = std::size_t;

/// Dense row-major matrix of doubles. Used for policies, logits and Q tables,
/// all of which are indexed [state, action].
class Table {
public:
  Table() = default;
  Table(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  friend bool operator==(const Table&, const Table&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Per-state action distribution.
using PolicyTable = Table;

/// One policy table per planning stage, stage 0 first. Needed wherever the
/// finite-horizon posterior policy depends on the remaining depth.
using StagedPolicy = std::vector<PolicyTable>;

inline PolicyTable uniform_policy(std::size_t n_states, std::size_t n_actions) {
  detail::require(n_states >= 1 && n_actions >= 1, "uniform_policy: empty shape");
  return PolicyTable(n_states, n_actions, 1.0 / static_cast<double>(n_actions));
}

}  // namespace trtsmc
