#pragma once

#include <iosfwd>
#include <optional>
#include <string>

#include "fpps/config.hpp"

namespace fpps {

enum ExitCode : int { exit_ok = 0, exit_validation = 1, exit_runtime = 2 };

/// Validates `cfg`, runs the configured experiment and writes meta.json,
/// diagnostics.csv, particles_initial.csv, particles_final.csv, samples.csv
/// (and kde_grid.csv for flows in one or two dimensions) into the output
/// directory. Validation problems are reported on `log` with exit_validation;
/// compute failures leave partial outputs plus error.json and return exit_runtime.
int run_experiment(ConfigMap cfg, const std::optional<std::string>& output_dir_override, std::ostream& log);

/// Version tag recorded in meta.json.
std::string version_tag();

}  // namespace fpps
