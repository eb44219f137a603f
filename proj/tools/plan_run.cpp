#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "trtsmc/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

nlohmann::json read_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw trtsmc::ConfigError(path + ": cannot open");
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw trtsmc::ConfigError(path + ": not valid JSON");
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Run a planning experiment and write metrics.csv, summary.json and config.resolved.json."};
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  bool force = false;
  std::vector<std::string> sets;
  app.add_option("config", config_path, "Experiment config (JSON)")->required();
  app.add_option("--seed", seed, "Run a single seed instead of the configured list");
  app.add_option("--output", output, "Output directory (overrides output_dir)");
  app.add_flag("--force", force, "Overwrite existing results");
  app.add_option("--set", sets, "Override a config field: dotted.path=value (repeatable)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  trtsmc::ExperimentConfig config;
  try {
    config = trtsmc::load_config(read_config(config_path));
    std::vector<std::string> overrides = sets;
    if (seed) overrides.push_back("seeds=[" + std::to_string(*seed) + "]");
    if (output) overrides.push_back("output_dir=" + nlohmann::json(*output).dump());
    config = trtsmc::apply_overrides(config, overrides);
    trtsmc::check_output_dir(config.output_dir, force);
  } catch (const trtsmc::ConfigError& e) {
    std::cerr << "plan-run: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "plan-run: config error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    const auto result = trtsmc::run_experiment(config);
    trtsmc::write_outputs(config, result);
  } catch (const std::exception& e) {
    std::cerr << "plan-run: runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
  std::cout << "wrote " << config.output_dir << "/{metrics.csv,summary.json,config.resolved.json}\n";
  return 0;
}
