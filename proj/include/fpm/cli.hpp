#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace fpm {

/// Exit codes of run_cli.
enum ExitCode : int {
  kExitOk = 0,
  kExitUnknown = 1,
  kExitConfig = 2,
  kExitNumeric = 3,
  kExitIo = 4,
};

/// `fpm <subcommand> ...`. On failure writes one line
/// `error: <category>: <message>` to `err` and returns a nonzero code; no
/// output file is written unless the whole subcommand succeeds.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace fpm
