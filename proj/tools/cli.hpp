#pragma once

#include <ostream>

namespace hydet::cli {

enum ExitCode {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDatasetError = 3,
  kNumericError = 4,
  kCheckpointError = 5,
  kUndecodableInput = 6,
};

/// Entry point of the `hydet` tool. Reports go to `out`; one-line
/// diagnostics ("error[<kind>]: <message>") go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hydet::cli
