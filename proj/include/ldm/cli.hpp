#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ldm {

/// Exit codes of the command-line entry point.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Runs one subcommand; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace ldm
