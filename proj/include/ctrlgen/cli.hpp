#pragma once

#include <nlohmann/json.hpp>

#include <ostream>
#include <string>
#include <vector>

namespace ctrlgen::cli {

/// Configuration every subcommand starts from; a --config file is merged
/// over it (JSON merge patch) and flags are applied last.
nlohmann::json default_config();

/// Runs one command line; `args` excludes the program name. On success the
/// command prints one JSON object {command, config, result} to `out`. On
/// failure it prints one JSON line {error, kind} to `err`.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ctrlgen::cli
