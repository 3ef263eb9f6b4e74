#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace tslformer {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// `args[0]` is the program name. Never throws; failures become exit codes
/// with a message on `err`.
int run_cli(std::span<const std::string> args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace tslformer
