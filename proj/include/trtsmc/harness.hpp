#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "trtsmc/em_loop.hpp"
#include "trtsmc/errors.hpp"
#include "trtsmc/io.hpp"
#include "trtsmc/mdp.hpp"
#include "trtsmc/mdp_io.hpp"
#include "trtsmc/planner.hpp"
#include "trtsmc/soft_oracle.hpp"

namespace trtsmc {

enum class ExperimentKind { path_degeneracy, oracle_convergence, train, ablation };

namespace detail {
inline const std::initializer_list<std::pair<const char*, ExperimentKind>> kExperimentNames{
    {"path_degeneracy", ExperimentKind::path_degeneracy},
    {"oracle_convergence", ExperimentKind::oracle_convergence},
    {"train", ExperimentKind::train},
    {"ablation", ExperimentKind::ablation}};
}  // namespace detail

/// KL floor on the planner policy so that a collapsed policy has finite
/// divergence from the reference.
inline constexpr double kPolicyKlFloor = 1e-6;

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::path_degeneracy;
  json env;  // resolved environment description, see build_env()
  PlannerConfig planner;
  LossConfig loss;
  TrainConfig train;  // planner and loss members mirror the fields above
  std::size_t iterations = 100;
  std::vector<std::uint64_t> seeds{0};
  std::map<std::string, std::vector<json>> sweep;  // dotted path -> values
  std::string output_dir = "results";
  std::size_t threads = 0;  // 0: hardware concurrency
};

// ---------------------------------------------------------------------------
// Environments

/// Accepts a builtin name ("two_arm", "chain", "absorbing_zero", "gridworld",
/// "trap", "random"), an object {"name": ..., params...}, or
/// {"name": "custom", "mdp": {...explicit MDP...}}. Returns the fully
/// populated object form.
inline json resolve_env(const json& desc, const std::string& path = "/env") {
  using detail::ObjectReader;
  json env = desc.is_string() ? json{{"name", desc}} : desc;
  if (!env.is_object()) ObjectReader::fail(path, "expected a builtin name or an object");
  if (!env.contains("name") || !env.at("name").is_string()) ObjectReader::fail(path + "/name", "expected a string");
  const std::string name = env.at("name").get<std::string>();

  json defaults;
  if (name == "two_arm") defaults = {{"discount", 1.0}};
  else if (name == "chain") defaults = {{"n", 3}, {"goal", 1.0}, {"discount", 1.0}};
  else if (name == "absorbing_zero") defaults = {{"actions", 4}};
  else if (name == "gridworld") defaults = {{"width", 3}, {"height", 3}, {"traps", json::array()}, {"discount", 1.0}};
  else if (name == "trap") defaults = {{"safe_reward", 0.1}, {"discount", 1.0}};
  else if (name == "random") defaults = {{"states", 4}, {"actions", 2}, {"seed", 0}, {"discount", 1.0}};
  else if (name == "custom") defaults = {{"mdp", nullptr}};
  else ObjectReader::fail(path + "/name", "unknown environment '" + name + "'");

  for (const auto& [key, value] : env.items()) {
    if (key == "name") continue;
    if (!defaults.contains(key)) ObjectReader::fail(path + "/" + key, "unknown field");
    const json& d = defaults.at(key);
    const bool ok = d.is_number_integer() ? value.is_number_integer() && value.get<long long>() >= 0
                    : d.is_number()       ? value.is_number()
                                          : true;
    if (!ok) ObjectReader::fail(path + "/" + key, d.is_number_integer() ? "expected a non-negative integer" : "expected a number");
  }
  for (const auto& [key, value] : defaults.items())
    if (!env.contains(key)) env[key] = value;
  if (name == "custom" && env.at("mdp").is_null()) ObjectReader::fail(path + "/mdp", "missing field");
  return env;
}

inline TabularMdp build_env(const json& resolved, const std::string& path = "/env") {
  const std::string name = resolved.at("name").get<std::string>();
  try {
    if (name == "two_arm") return make_two_arm(resolved.at("discount").get<double>());
    if (name == "chain")
      return make_chain(resolved.at("n").get<std::size_t>(), resolved.at("goal").get<double>(),
                        resolved.at("discount").get<double>());
    if (name == "absorbing_zero") return make_absorbing_zero(resolved.at("actions").get<std::size_t>());
    if (name == "gridworld") {
      std::vector<Cell> traps;
      const json& t = resolved.at("traps");
      if (!t.is_array()) detail::ObjectReader::fail(path + "/traps", "expected an array of [x, y] pairs");
      for (std::size_t i = 0; i < t.size(); ++i) {
        const json& c = t[i];
        if (!c.is_array() || c.size() != 2 || !c[0].is_number_integer() || !c[1].is_number_integer())
          detail::ObjectReader::fail(path + "/traps/" + std::to_string(i), "expected an [x, y] pair");
        traps.push_back({c[0].get<std::size_t>(), c[1].get<std::size_t>()});
      }
      return make_gridworld(resolved.at("width").get<std::size_t>(), resolved.at("height").get<std::size_t>(), traps,
                            resolved.at("discount").get<double>());
    }
    if (name == "trap") return make_trap(resolved.at("safe_reward").get<double>(), resolved.at("discount").get<double>());
    if (name == "random")
      return make_random_mdp(resolved.at("states").get<std::size_t>(), resolved.at("actions").get<std::size_t>(),
                             resolved.at("seed").get<std::uint64_t>(), resolved.at("discount").get<double>());
    return mdp_from_json(resolved.at("mdp"));
  } catch (const ConfigError&) {
    throw;
  } catch (const ContractViolation& e) {
    const std::string what = e.what();
    // MDP loader messages already start with a JSON pointer.
    if (name == "custom" && !what.empty() && what[0] == '/') throw ConfigError(path + "/mdp" + what);
    throw ConfigError(path + ": " + what);
  }
}

// ---------------------------------------------------------------------------
// Config ingestion

namespace detail {

inline json train_to_json(const ExperimentConfig& c) {
  return {{"iterations", c.iterations},
          {"episode_horizon", c.train.episode_horizon},
          {"buffer_capacity", c.train.buffer_capacity},
          {"batch_size", c.train.batch_size},
          {"updates_per_iteration", c.train.updates_per_iteration},
          {"eval_horizon", c.train.eval_horizon}};
}

inline const json* find_dotted(const json& root, const std::string& dotted) {
  const json* node = &root;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) return nullptr;
    node = &node->at(part);
  }
  return node;
}

}  // namespace detail

/// Serializes every field, defaults included. Parsing the result yields the
/// same config.
inline json to_json(const ExperimentConfig& c) {
  json sweep = json::object();
  for (const auto& [key, values] : c.sweep) sweep[key] = values;
  return {{"experiment", detail::enum_name(c.experiment, detail::kExperimentNames)},
          {"env", c.env},
          {"planner", to_json(c.planner)},
          {"loss", to_json(c.loss)},
          {"train", detail::train_to_json(c)},
          {"seeds", c.seeds},
          {"sweep", std::move(sweep)},
          {"output_dir", c.output_dir},
          {"threads", c.threads}};
}

/// Parses without expanding the sweep; every field is optional except
/// `experiment` and `env`. Errors are ConfigError with a JSON pointer.
inline ExperimentConfig parse_config_fields(const json& j) {
  using detail::ObjectReader;
  ObjectReader r(j, "");
  ExperimentConfig c;
  if (!r.has("experiment")) ObjectReader::fail("/experiment", "missing field");
  r.choice("experiment", c.experiment, detail::kExperimentNames);
  if (!r.has("env")) ObjectReader::fail("/env", "missing field");
  c.env = resolve_env(r.at("env"));
  if (r.has("planner")) c.planner = planner_config_from_json(r.at("planner"));
  if (r.has("loss")) c.loss = loss_config_from_json(r.at("loss"));
  if (r.has("train")) {
    ObjectReader t(r.at("train"), "/train");
    t.count("iterations", c.iterations);
    t.count("episode_horizon", c.train.episode_horizon);
    t.count("buffer_capacity", c.train.buffer_capacity);
    t.count("batch_size", c.train.batch_size);
    t.count("updates_per_iteration", c.train.updates_per_iteration);
    t.count("eval_horizon", c.train.eval_horizon);
    t.finish();
  }
  c.train.planner = c.planner;
  c.train.loss = c.loss;
  try {
    c.train.validate();
  } catch (const ContractViolation& e) {
    ObjectReader::fail("/train", e.what());
  }
  if (c.iterations < 1) ObjectReader::fail("/train/iterations", "must be >= 1");
  if (r.has("seeds")) {
    const json& s = r.at("seeds");
    if (s.is_number_integer() && s.get<long long>() >= 1) {
      c.seeds.clear();
      for (std::uint64_t i = 0; i < s.get<std::uint64_t>(); ++i) c.seeds.push_back(i);
    } else if (s.is_array() && !s.empty()) {
      c.seeds.clear();
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (!s[i].is_number_integer() || s[i].get<long long>() < 0)
          ObjectReader::fail("/seeds/" + std::to_string(i), "expected a non-negative integer");
        c.seeds.push_back(s[i].get<std::uint64_t>());
      }
    } else {
      ObjectReader::fail("/seeds", "expected a positive count or a non-empty list of seeds");
    }
  }
  if (r.has("sweep")) {
    const json& s = r.at("sweep");
    if (!s.is_object()) ObjectReader::fail("/sweep", "expected an object of dotted path -> value list");
    for (const auto& [key, values] : s.items()) {
      if (!values.is_array() || values.empty()) ObjectReader::fail("/sweep/" + key, "expected a non-empty list");
      c.sweep[key] = values.get<std::vector<json>>();
    }
  }
  if (r.has("output_dir")) {
    const json& o = r.at("output_dir");
    if (!o.is_string() || o.get<std::string>().empty()) ObjectReader::fail("/output_dir", "expected a path");
    c.output_dir = o.get<std::string>();
  }
  r.count("threads", c.threads);
  r.finish();
  build_env(c.env);  // surface environment errors at load time
  return c;
}

/// Sets a dotted-path field of a resolved config. The path must name an
/// existing field.
inline void set_dotted(json& root, const std::string& dotted, const json& value, const std::string& where) {
  if (dotted.empty()) throw ConfigError(where + ": empty parameter path");
  json* node = &root;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part))
      throw ConfigError(where + ": '" + dotted + "' does not name a config field");
    node = &(*node)[part];
  }
  *node = value;
}

/// One assignment of every sweep key, in lexicographic key order.
using SweepPoint = std::vector<std::pair<std::string, json>>;

inline std::vector<SweepPoint> sweep_points(const ExperimentConfig& c) {
  std::vector<SweepPoint> points{{}};
  for (const auto& [key, values] : c.sweep) {
    std::vector<SweepPoint> next;
    for (const auto& p : points)
      for (const auto& v : values) {
        SweepPoint q = p;
        q.emplace_back(key, v);
        next.push_back(std::move(q));
      }
    points = std::move(next);
  }
  return points;
}

inline ExperimentConfig config_at(const ExperimentConfig& base, const SweepPoint& point) {
  if (point.empty()) return base;
  json j = to_json(base);
  j.erase("sweep");
  for (const auto& [key, value] : point) set_dotted(j, key, value, "/sweep/" + key);
  return parse_config_fields(j);
}

/// Full load: parse, then check that every sweep point is itself valid.
inline ExperimentConfig load_config(const json& j) {
  ExperimentConfig c = parse_config_fields(j);
  const json resolved = to_json(c);
  for (const auto& [key, _] : c.sweep) {
    if (key == "sweep" || key.rfind("sweep.", 0) == 0 || key == "seeds" || key == "output_dir")
      throw ConfigError("/sweep/" + key + ": parameter cannot be swept");
    if (!detail::find_dotted(resolved, key)) throw ConfigError("/sweep/" + key + ": does not name a config field");
  }
  for (const auto& p : sweep_points(c)) config_at(c, p);
  return c;
}

/// Applies `--set key=value` overrides to a resolved config. The value is
/// parsed as JSON, falling back to a plain string.
inline ExperimentConfig apply_overrides(const ExperimentConfig& c, const std::vector<std::string>& sets) {
  if (sets.empty()) return c;
  json j = to_json(c);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set " + s + ": expected key=value");
    const std::string key = s.substr(0, eq), text = s.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    set_dotted(j, key, value, "--set " + key);
  }
  return load_config(j);
}

// ---------------------------------------------------------------------------
// Experiments

struct MetricRow {
  std::size_t step = 0;
  std::string metric;
  double value = 0.0;
};

namespace detail {

inline std::vector<double> exact_root_posterior(const std::vector<SoftSolution>& stages) {
  const auto row = stages.front().posterior_policy.row(0);
  return {row.begin(), row.end()};
}

inline void diagnostics_rows(const PlannerOutput& out, std::vector<MetricRow>& rows) {
  for (const auto& d : out.diagnostics) {
    rows.push_back({d.step, "ess", d.ess});
    rows.push_back({d.step, "distinct_ancestors", static_cast<double>(d.distinct_ancestors)});
    rows.push_back({d.step, "terminal_particles", static_cast<double>(d.terminal_particles)});
    rows.push_back({d.step, "resampled", d.resampled ? 1.0 : 0.0});
  }
}

}  // namespace detail

/// Runs one (config, seed) cell. Scalar per-run metrics use step 0; per-step
/// planner diagnostics use the planner step; learning curves use the
/// 1-based iteration.
inline std::vector<MetricRow> run_cell(const ExperimentConfig& c, std::uint64_t seed) {
  const TabularMdp mdp = build_env(c.env);
  if (mdp.terminal(0)) throw ConfigError("/env: start state 0 is terminal");
  std::vector<MetricRow> rows;
  const PolicyTable uniform = uniform_policy(mdp.n_states(), mdp.n_actions());

  switch (c.experiment) {
    case ExperimentKind::path_degeneracy:
    case ExperimentKind::oracle_convergence: {
      const auto stages = posterior_stages(mdp, uniform, c.planner.depth, c.planner.temperature);
      const auto exact = detail::exact_root_posterior(stages);
      const ExactSoftGuide guide(uniform, stages);
      const PlannerOutput out = run_planner(mdp, 0, guide, c.planner, seed);
      rows.push_back({0, "kl_to_exact", kl_divergence(exact, out.root_policy, kPolicyKlFloor)});
      rows.push_back({0, "tv_to_exact", total_variation(exact, out.root_policy)});
      if (c.experiment == ExperimentKind::path_degeneracy) {
        rows.push_back({0, "distinct_ancestors", static_cast<double>(out.diagnostics.back().distinct_ancestors)});
      } else {
        double worst = 0.0;
        for (std::size_t a = 0; a < exact.size(); ++a) worst = std::max(worst, std::abs(exact[a] - out.root_policy[a]));
        rows.push_back({0, "max_abs_error", worst});
      }
      break;
    }
    case ExperimentKind::ablation: {
      const auto stages = posterior_stages(mdp, uniform, c.planner.depth, c.planner.temperature);
      const auto exact = detail::exact_root_posterior(stages);
      const Model model(mdp.n_states(), mdp.n_actions());
      const PlannerOutput out = run_planner(mdp, 0, model, c.planner, seed);
      rows.push_back({0, "root_value", out.root_value});
      rows.push_back({0, "search_value", out.search_value});
      rows.push_back({0, "tv_to_exact", total_variation(exact, out.root_policy)});
      detail::diagnostics_rows(out, rows);
      break;
    }
    case ExperimentKind::train: {
      rows.push_back({0, "optimal_return", optimal_policy(mdp, c.train.eval_horizon).v_star[0]});
      Trainer trainer(mdp, c.train, seed);
      for (std::size_t n = 1; n <= c.iterations; ++n) {
        const IterationMetrics m = trainer.iterate();
        rows.push_back({n, "greedy_return", m.greedy_return});
        rows.push_back({n, "policy_return", m.policy_return});
        rows.push_back({n, "entropy", m.entropy});
      }
      break;
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Statistics

/// Percentile bootstrap interval for the mean. level = 0 returns the sample
/// median twice.
template <class Rng>
std::pair<double, double> bootstrap_ci(std::span<const double> samples, double level, std::size_t resamples, Rng& rng) {
  detail::require(samples.size() >= 2, "bootstrap_ci: need at least 2 samples");
  detail::require(level >= 0.0 && level < 1.0, "bootstrap_ci: level must lie in [0, 1)");
  detail::require(resamples >= 1, "bootstrap_ci: resamples must be >= 1");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back()) return {sorted.front(), sorted.front()};
  auto quantile = [](const std::vector<double>& v, double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < v.size() ? v[i] + frac * (v[i + 1] - v[i]) : v[i];
  };
  if (level == 0.0) {
    const double m = quantile(sorted, 0.5);
    return {m, m};
  }
  const std::size_t n = samples.size();
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto idx = std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
      sum += samples[idx];
    }
    m = sum / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile(means, tail), quantile(means, 1.0 - tail)};
}

inline constexpr double kSummaryLevel = 0.99;
inline constexpr std::size_t kSummaryResamples = 10'000;

// ---------------------------------------------------------------------------
// Running and output

struct CellResult {
  std::size_t point = 0;
  std::uint64_t seed = 0;
  std::vector<MetricRow> rows;
};

struct ExperimentResult {
  std::vector<SweepPoint> points;
  std::vector<CellResult> cells;  // point-major, seeds in config order
};

/// Every (sweep point, seed) cell, possibly on several threads. Results are
/// independent of the thread count.
inline ExperimentResult run_experiment(const ExperimentConfig& c) {
  ExperimentResult result;
  result.points = sweep_points(c);
  std::vector<ExperimentConfig> configs;
  for (const auto& p : result.points) configs.push_back(config_at(c, p));
  for (std::size_t p = 0; p < result.points.size(); ++p)
    for (std::uint64_t seed : c.seeds) result.cells.push_back({p, seed, {}});

  std::size_t workers = c.threads ? c.threads : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, result.cells.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i; (i = next.fetch_add(1)) < result.cells.size();) {
        auto& cell = result.cells[i];
        cell.rows = run_cell(configs[cell.point], cell.seed);
      }
    } catch (...) {
      errors[w] = std::current_exception();
      next = result.cells.size();
    }
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return result;
}

inline std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Sweep values: shortest text that parses back to the same JSON value.
inline std::string format_value(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

inline std::string point_label(const SweepPoint& p) {
  if (p.empty()) return "default";
  std::string out;
  for (const auto& [key, value] : p) out += (out.empty() ? "" : ",") + key + "=" + format_value(value);
  return out;
}

inline std::string metrics_csv(const ExperimentConfig& c, const ExperimentResult& r) {
  std::ostringstream os;
  for (const auto& [key, _] : c.sweep) os << csv_field("sweep_" + key) << ',';
  os << "seed,step,metric,value\n";
  for (const auto& cell : r.cells) {
    std::string prefix;
    for (const auto& [_, value] : r.points[cell.point]) prefix += csv_field(format_value(value)) + ",";
    prefix += std::to_string(cell.seed) + ",";
    for (const auto& row : cell.rows)
      os << prefix << row.step << ',' << csv_field(row.metric) << ',' << format_real(row.value) << '\n';
  }
  return os.str();
}

/// Per sweep point and metric: mean over seeds of the metric's last-step
/// value, with a percentile-bootstrap interval.
inline json summary_json(const ExperimentResult& r) {
  json out = json::object();
  for (std::size_t p = 0; p < r.points.size(); ++p) {
    std::map<std::string, std::vector<double>> finals;
    for (const auto& cell : r.cells) {
      if (cell.point != p) continue;
      std::map<std::string, std::pair<std::size_t, double>> last;
      for (const auto& row : cell.rows) {
        auto it = last.find(row.metric);
        if (it == last.end() || row.step >= it->second.first) last[row.metric] = {row.step, row.value};
      }
      for (const auto& [metric, sv] : last) finals[metric].push_back(sv.second);
    }
    json point = json::object();
    std::size_t m_index = 0;
    for (const auto& [metric, values] : finals) {
      double mean = 0.0;
      for (double v : values) mean += v;
      mean /= static_cast<double>(values.size());
      double lo = mean, hi = mean;
      if (values.size() >= 2) {
        RandomStream rng(derive_seed(0x5eedULL, p, m_index), 0);
        std::tie(lo, hi) = bootstrap_ci(std::span<const double>(values), kSummaryLevel, kSummaryResamples, rng);
      }
      point[metric] = {{"mean", mean}, {"lo", lo}, {"hi", hi}};
      ++m_index;
    }
    out[point_label(r.points[p])] = std::move(point);
  }
  return out;
}

inline constexpr const char* kOutputFiles[] = {"metrics.csv", "summary.json", "config.resolved.json"};

/// Fails with ConfigError when results already exist and `force` is false.
inline void check_output_dir(const std::filesystem::path& dir, bool force) {
  if (force) return;
  for (const char* f : kOutputFiles)
    if (std::filesystem::exists(dir / f))
      throw ConfigError((dir / f).string() + ": results already exist (use --force to overwrite)");
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error(tmp + ": cannot open for writing");
    os << content;
    if (!os) throw std::runtime_error(tmp + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_outputs(const ExperimentConfig& c, const ExperimentResult& r) {
  const std::filesystem::path dir(c.output_dir);
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "config.resolved.json", to_json(c).dump(2) + "\n");
  write_file_atomic(dir / "metrics.csv", metrics_csv(c, r));
  write_file_atomic(dir / "summary.json", summary_json(r).dump(2) + "\n");
}

}  // namespace trtsmc
