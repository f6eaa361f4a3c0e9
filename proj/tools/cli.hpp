#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace csdiff::cli {

/// Exit codes: 0 success, 1 failed operation, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Parses `args` (program name first) and runs the selected subcommand.
/// Failures print one JSON object {"error": {"type", "message"}} to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Help text of one subcommand ("" for the top level), as `--help` prints it.
std::string help_text(const std::string& subcommand);

/// All subcommand names, in help order.
std::vector<std::string> subcommands();

}  // namespace csdiff::cli
