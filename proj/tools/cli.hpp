#pragma once

// Command-line front end. Exit codes:
//   0 success
//   1 a verification command found failures (gradcheck)
//   2 bad flags or an invalid configuration
//   3 data, checkpoint or metric errors
//   4 training produced a non-finite loss
//   5 unexpected internal error

#include <iosfwd>
#include <string>
#include <vector>

namespace dafdft::cli {

enum ExitCode : int {
    kOk = 0,
    kCheckFailed = 1,
    kBadFlags = 2,
    kDataError = 3,
    kNonFinite = 4,
    kInternalError = 5,
};

/// Runs one subcommand. `args` excludes the program name. Results go to
/// `out`, diagnostics and progress to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dafdft::cli
