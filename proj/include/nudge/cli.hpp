#pragma once

#include <ostream>

#include "nudge/error.hpp"

namespace nudge::cli {

/// 0 success, 1 computational failure, 2 input or validation failure.
enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

ExitCode exit_code_for(ErrorCode code);

/// Subcommands: fit-pilot, design, estimate, simulate. Messages go to `err`,
/// summaries to `out`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace nudge::cli
