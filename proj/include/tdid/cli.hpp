#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tdid {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the `tdid` tool; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// TDID_THREADS, default 1. Throws ConfigError on malformed values.
int worker_threads();

}  // namespace tdid
