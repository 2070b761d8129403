#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cir::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericFailure = 3 };

/// Runs one verb. `args` excludes the program name. Machine-readable JSON goes
/// to `out`, log lines to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv);

}  // namespace cir::cli
