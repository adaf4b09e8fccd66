#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fpps/config.hpp"
#include "fpps/core.hpp"
#include "fpps/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Fokker-Planck particle samplers for Bayesian inverse problems"};
  app.require_subcommand(1);
  app.set_version_flag("--version", fpps::version_tag());

  CLI::App* run = app.add_subcommand("run", "Run one experiment described by a config file");
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 1;
  std::string out_dir;
  run->add_option("config", config_path, "Path to the experiment config")->required();
  run->add_option("--set", overrides, "Override a config entry, key=value (repeatable)");
  run->add_option("--threads", threads, "Maximum worker threads")->check(CLI::PositiveNumber);
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fpps::exit_validation;
  }

  fpps::set_max_threads(threads);
  fpps::ConfigMap cfg;
  try {
    cfg = fpps::ConfigMap::load(config_path);
    for (const std::string& o : overrides) cfg.set(o);
  } catch (const fpps::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return fpps::exit_validation;
  }
  const std::optional<std::string> out = out_dir.empty() ? std::nullopt : std::optional<std::string>(out_dir);
  return fpps::run_experiment(std::move(cfg), out, std::cerr);
}
