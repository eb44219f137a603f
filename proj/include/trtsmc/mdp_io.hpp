#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "trtsmc/mdp.hpp"

namespace trtsmc {

namespace detail {

[[noreturn]] inline void mdp_json_error(const std::string& path, const std::string& what) {
  throw ContractViolation((path.empty() ? std::string("/") : path) + ": " + what);
}

inline std::size_t json_count(const nlohmann::json& j, const std::string& key) {
  const std::string path = "/" + key;
  if (!j.contains(key)) mdp_json_error(path, "missing field");
  const auto& v = j.at(key);
  if (!v.is_number_integer() && !v.is_number_unsigned()) mdp_json_error(path, "expected an integer");
  if (v.get<long long>() < 1) mdp_json_error(path, "must be >= 1");
  return v.get<std::size_t>();
}

inline double json_real(const nlohmann::json& v, const std::string& path) {
  if (!v.is_number()) mdp_json_error(path, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) mdp_json_error(path, "non-finite value");
  return x;
}

inline const nlohmann::json& json_array(const nlohmann::json& v, std::size_t size, const std::string& path) {
  if (!v.is_array()) mdp_json_error(path, "expected an array");
  if (v.size() != size) mdp_json_error(path, "expected " + std::to_string(size) + " entries, got " + std::to_string(v.size()));
  return v;
}

}  // namespace detail

/// Parses {"n_states","n_actions","transition","reward","terminal","discount"}.
/// Every invariant violation is reported with the JSON pointer of the
/// offending element.
inline TabularMdp mdp_from_json(const nlohmann::json& j) {
  using detail::json_array;
  using detail::json_real;
  using detail::mdp_json_error;
  if (!j.is_object()) mdp_json_error("", "expected an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "n_states" && key != "n_actions" && key != "transition" && key != "reward" && key != "terminal" &&
        key != "discount")
      mdp_json_error("/" + key, "unknown field");
  }
  const std::size_t ns = detail::json_count(j, "n_states");
  const std::size_t na = detail::json_count(j, "n_actions");
  for (const char* key : {"transition", "reward", "terminal", "discount"})
    if (!j.contains(key)) mdp_json_error(std::string("/") + key, "missing field");

  const double discount = json_real(j.at("discount"), "/discount");
  if (discount < 0.0 || discount > 1.0) mdp_json_error("/discount", "must lie in [0,1]");

  std::vector<bool> terminal(ns);
  const auto& jt = json_array(j.at("terminal"), ns, "/terminal");
  for (std::size_t s = 0; s < ns; ++s) {
    if (!jt[s].is_boolean()) mdp_json_error("/terminal/" + std::to_string(s), "expected a boolean");
    terminal[s] = jt[s].get<bool>();
  }

  std::vector<double> reward(ns * na);
  const auto& jr = json_array(j.at("reward"), ns, "/reward");
  for (std::size_t s = 0; s < ns; ++s) {
    const std::string ps = "/reward/" + std::to_string(s);
    const auto& row = json_array(jr[s], na, ps);
    for (std::size_t a = 0; a < na; ++a) {
      reward[s * na + a] = json_real(row[a], ps + "/" + std::to_string(a));
      if (terminal[s] && reward[s * na + a] != 0.0)
        mdp_json_error(ps + "/" + std::to_string(a), "terminal state must have zero reward");
    }
  }

  std::vector<double> transition(ns * na * ns);
  const auto& jp = json_array(j.at("transition"), ns, "/transition");
  for (std::size_t s = 0; s < ns; ++s) {
    const std::string ps = "/transition/" + std::to_string(s);
    const auto& per_action = json_array(jp[s], na, ps);
    for (std::size_t a = 0; a < na; ++a) {
      const std::string pa = ps + "/" + std::to_string(a);
      const auto& row = json_array(per_action[a], ns, pa);
      double sum = 0.0;
      for (std::size_t x = 0; x < ns; ++x) {
        const double p = json_real(row[x], pa + "/" + std::to_string(x));
        if (p < 0.0) mdp_json_error(pa + "/" + std::to_string(x), "negative probability");
        transition[(s * na + a) * ns + x] = p;
        sum += p;
      }
      if (std::abs(sum - 1.0) > TabularMdp::kRowTolerance)
        mdp_json_error(pa, "row sums to " + std::to_string(sum) + ", expected 1");
      if (terminal[s] && row[s].get<double>() != 1.0) mdp_json_error(pa, "terminal state must be absorbing");
    }
  }
  return TabularMdp(ns, na, std::move(transition), std::move(reward), std::move(terminal), discount);
}

inline nlohmann::json mdp_to_json(const TabularMdp& mdp) {
  nlohmann::json transition = nlohmann::json::array();
  nlohmann::json reward = nlohmann::json::array();
  nlohmann::json terminal = nlohmann::json::array();
  for (StateId s = 0; s < mdp.n_states(); ++s) {
    nlohmann::json per_action = nlohmann::json::array();
    nlohmann::json rrow = nlohmann::json::array();
    for (ActionId a = 0; a < mdp.n_actions(); ++a) {
      const auto row = mdp.transition_row(s, a);
      per_action.push_back(std::vector<double>(row.begin(), row.end()));
      rrow.push_back(mdp.reward(s, a));
    }
    transition.push_back(std::move(per_action));
    reward.push_back(std::move(rrow));
    terminal.push_back(static_cast<bool>(mdp.terminal(s)));
  }
  return {{"n_states", mdp.n_states()}, {"n_actions", mdp.n_actions()}, {"transition", std::move(transition)},
          {"reward", std::move(reward)},  {"terminal", std::move(terminal)}, {"discount", mdp.discount()}};
}

}  // namespace trtsmc
