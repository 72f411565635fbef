#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace tensorlens::cli {

enum ExitCode : int {
    kPass = 0,
    kInvariantFailure = 1,
    kUsageError = 2,
    kIoError = 3,
};

/// Runs `tensorlens <args...>` (args exclude the program name). All output
/// goes to `out`/`err`; nothing is read from stdin.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes);

} // namespace tensorlens::cli
