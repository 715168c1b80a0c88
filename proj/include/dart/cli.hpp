#pragma once

// Command-line front end: degrade, train, eval, gradcheck, bench, ablate.

#include <ostream>
#include <string>
#include <vector>

namespace dart {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// args excludes the program name. CSV and reports go to out; usage text
/// and error messages go to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dart
