#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace transfo {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs the `transfo` command line. `args` excludes the program name.
/// Machine-readable results go to `out`, logs and usage text to `err`.
/// Returns the process exit code: 0 success, 1 runtime failure, 2 usage error.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace transfo
