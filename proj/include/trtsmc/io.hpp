#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "trtsmc/em_loop.hpp"
#include "trtsmc/errors.hpp"
#include "trtsmc/planner.hpp"

namespace trtsmc {

using nlohmann::json;

namespace detail {

/// Reads fields of a JSON object, rejecting unknown keys with a
/// JSON-pointer–qualified ConfigError.
class ObjectReader {
public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw ConfigError((path.empty() ? std::string("/") : path) + ": " + what);
  }

  std::string path(const std::string& key) const { return path_ + "/" + key; }
  bool has(const std::string& key) const { return j_.contains(key); }
  const json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void real(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = at(key);
    if (!v.is_number()) fail(path(key), "expected a number");
    out = v.get<double>();
  }
  void count(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const json& v = at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) fail(path(key), "expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  template <class Enum>
  void choice(const std::string& key, Enum& out, std::initializer_list<std::pair<const char*, Enum>> options) {
    if (!has(key)) return;
    const json& v = at(key);
    std::string allowed;
    if (v.is_string()) {
      for (const auto& [name, value] : options)
        if (v.get<std::string>() == name) {
          out = value;
          return;
        }
    }
    for (const auto& [name, _] : options) allowed += (allowed.empty() ? "" : "|") + std::string(name);
    fail(path(key), "expected one of " + allowed);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) fail(path(key), "unknown field");
  }

private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Enum>
const char* enum_name(Enum value, std::initializer_list<std::pair<const char*, Enum>> options) {
  for (const auto& [name, v] : options)
    if (v == value) return name;
  return "?";
}

inline const std::initializer_list<std::pair<const char*, ProposalMode>> kProposalNames{
    {"prior", ProposalMode::prior}, {"trust_region", ProposalMode::trust_region}};
inline const std::initializer_list<std::pair<const char*, InferenceMode>> kInferenceNames{
    {"dirac", InferenceMode::dirac}, {"message_passing", InferenceMode::message_passing}};
inline const std::initializer_list<std::pair<const char*, ResampleMode>> kResampleNames{
    {"baseline", ResampleMode::baseline}, {"revived", ResampleMode::revived}};
inline const std::initializer_list<std::pair<const char*, ValueExpectation>> kExpectationNames{
    {"sampled", ValueExpectation::sampled}, {"exact", ValueExpectation::exact}};

}  // namespace detail

inline json to_json(const PlannerConfig& c) {
  using namespace detail;
  return {{"k", c.k},
          {"depth", c.depth},
          {"resample_period", c.resample_period},
          {"alpha", c.alpha},
          {"temperature", c.temperature},
          {"lambda", c.lambda_smc},
          {"gamma", c.gamma},
          {"sigma", c.sigma},
          {"proposal", enum_name(c.proposal_mode, kProposalNames)},
          {"inference", enum_name(c.inference_mode, kInferenceNames)},
          {"resample", enum_name(c.resample_mode, kResampleNames)},
          {"value_expectation", enum_name(c.value_expectation, kExpectationNames)},
          {"bootstrap_atoms", c.bootstrap_atoms}};
}

/// Fields absent from `j` keep their value in `base`.
inline PlannerConfig planner_config_from_json(const json& j, const std::string& path = "/planner",
                                              PlannerConfig base = {}) {
  using namespace detail;
  ObjectReader r(j, path);
  r.count("k", base.k);
  r.count("depth", base.depth);
  r.count("resample_period", base.resample_period);
  r.real("alpha", base.alpha);
  r.real("temperature", base.temperature);
  r.real("lambda", base.lambda_smc);
  r.real("gamma", base.gamma);
  r.real("sigma", base.sigma);
  r.choice("proposal", base.proposal_mode, kProposalNames);
  r.choice("inference", base.inference_mode, kInferenceNames);
  r.choice("resample", base.resample_mode, kResampleNames);
  r.choice("value_expectation", base.value_expectation, kExpectationNames);
  r.count("bootstrap_atoms", base.bootstrap_atoms);
  r.finish();
  try {
    base.validate();
  } catch (const ContractViolation& e) {
    ObjectReader::fail(path, e.what());
  }
  return base;
}

inline json to_json(const LossConfig& c) {
  return {{"c_v", c.c_v},       {"c_pi", c.c_pi},         {"c_ent", c.c_ent},
          {"lambda_outer", c.lambda_outer}, {"gamma_outer", c.gamma_outer}, {"lr", c.lr},
          {"clip_abs", c.clip_abs}, {"clip_norm", c.clip_norm}};
}

inline LossConfig loss_config_from_json(const json& j, const std::string& path = "/loss", LossConfig base = {}) {
  detail::ObjectReader r(j, path);
  r.real("c_v", base.c_v);
  r.real("c_pi", base.c_pi);
  r.real("c_ent", base.c_ent);
  r.real("lambda_outer", base.lambda_outer);
  r.real("gamma_outer", base.gamma_outer);
  r.real("lr", base.lr);
  r.real("clip_abs", base.clip_abs);
  r.real("clip_norm", base.clip_norm);
  r.finish();
  try {
    base.validate();
  } catch (const ContractViolation& e) {
    detail::ObjectReader::fail(path, e.what());
  }
  return base;
}

inline json to_json(const StepDiagnostics& d) {
  return {{"step", d.step},
          {"ess", d.ess},
          {"distinct_ancestors", d.distinct_ancestors},
          {"terminal_particles", d.terminal_particles},
          {"resampled", d.resampled}};
}

inline json to_json(const PlannerOutput& out) {
  json diag = json::array();
  for (const auto& d : out.diagnostics) diag.push_back(to_json(d));
  return {{"root_policy", out.root_policy},
          {"root_value", out.root_value},
          {"search_value", out.search_value},
          {"root_actions", out.root_actions},
          {"ancestor_logq", out.ancestor_logq},
          {"diagnostics", std::move(diag)}};
}

inline json to_json(const Model& m) {
  json logits = json::array(), q = json::array();
  for (StateId s = 0; s < m.n_states(); ++s) {
    const auto lr = m.policy_logits.row(s);
    const auto qr = m.q_table.row(s);
    logits.push_back(std::vector<double>(lr.begin(), lr.end()));
    q.push_back(std::vector<double>(qr.begin(), qr.end()));
  }
  return {{"policy_logits", std::move(logits)}, {"v_table", m.v_table}, {"q_table", std::move(q)}};
}

inline Model model_from_json(const json& j) {
  const auto& v = j.at("v_table");
  const auto& logits = j.at("policy_logits");
  const auto& q = j.at("q_table");
  const std::size_t ns = v.size();
  detail::require(ns >= 1 && logits.size() == ns && q.size() == ns, "model_from_json: inconsistent state count");
  const std::size_t na = logits.at(0).size();
  Model m(ns, na);
  for (StateId s = 0; s < ns; ++s) {
    detail::require(logits.at(s).size() == na && q.at(s).size() == na, "model_from_json: ragged table");
    m.v_table[s] = v.at(s).get<double>();
    for (ActionId a = 0; a < na; ++a) {
      m.policy_logits(s, a) = logits.at(s).at(a).get<double>();
      m.q_table(s, a) = q.at(s).at(a).get<double>();
    }
  }
  return m;
}

struct Checkpoint {
  Model model;
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;  // RNG state: streams are a pure function of (seed, iteration)

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline json to_json(const Checkpoint& c) {
  return {{"model", to_json(c.model)}, {"iteration", c.iteration}, {"rng", {{"seed", c.seed}, {"iteration", c.iteration}}}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
  Checkpoint c;
  c.model = model_from_json(j.at("model"));
  c.iteration = j.at("iteration").get<std::uint64_t>();
  c.seed = j.at("rng").at("seed").get<std::uint64_t>();
  return c;
}

inline Checkpoint make_checkpoint(const Trainer& trainer) { return {trainer.model(), trainer.iteration(), trainer.seed()}; }

}  // namespace trtsmc
