// SPDX-License-Identifier: Apache-2.0
//
// Command dispatch for the `retrofit` executable.
//
// Exit codes:
//   0  success
//   1  unexpected internal error
//   2  configuration or command-line error
//   3  data or input error (missing files, bad token ids, empty corpus)
//   4  training divergence abort
//   5  checkpoint format or surgery plan error

#pragma once

#include <exception>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

namespace retrofit {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitInput = 3,
  kExitDivergence = 4,
  kExitFormat = 5,
};

struct Command {
  // surgery | train | eval | flops | schedule-dump | layer-scores
  std::string subcommand;
  std::string config_path;
  std::vector<std::string> overrides;  // "dotted.key=value"
  // Subcommand options, keyed by long flag name without dashes.
  nlohmann::json options = nlohmann::json::object();
};

// Maps an in-flight exception to its exit code.
int exit_code_for(const std::exception& e);

// Runs the command, writing a human-readable report to `out`. Errors
// propagate as exceptions.
void execute(const Command& cmd, std::ostream& out);

// execute() with errors mapped to exit codes and reported on `err`.
int run_command(const Command& cmd, std::ostream& out, std::ostream& err);

// argv front end.
int run_cli(int argc, char** argv);

}  // namespace retrofit
