#pragma once

#include <stdexcept>
#include <string>

namespace trtsmc {

/// Precondition or type invariant violated by the caller.
class ContractViolation : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value appeared where the computation requires a finite one.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Exhaustive enumeration would exceed its trajectory budget.
class BudgetExceeded : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Particle weights cannot be normalized (all zero or non-finite).
class DegenerateWeights : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A proposal puts mass where the prior has none, so the KL is undefined.
class SupportViolation : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Invalid experiment configuration; carries a path-qualified message.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace detail
}  // namespace trtsmc
