#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sineseg {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerification = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitDataMismatch = 4,
  kExitBudget = 5,
};

// Runs one command line (args excludes the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sineseg
