#pragma once

#include <string>
#include <vector>

namespace labdyn::cli {

enum ExitCode : int {
  kSuccess = 0,
  kInternalError = 1,
  kValidationError = 2,
  kNotConverged = 3,
  kIoFailure = 4,
};

/// Entry point shared by the binary and the tests. args[0] is the program name.
int run(const std::vector<std::string>& args);

}  // namespace labdyn::cli
