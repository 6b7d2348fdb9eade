#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace whisq::cli {

/// Exit codes are part of the command-line contract.
enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kDataError = 2,
  kNumericError = 3,
  kGradcheckFailed = 4,
};

/// Runs one command. args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace whisq::cli
