#pragma once

#include <string>
#include <vector>

namespace drift {

// Exit codes: 0 success, 2 usage/config, 3 data/integrity, 4 numerical.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIntegrity = 3;
inline constexpr int kExitNumerical = 4;

// Runs one CLI invocation (args exclude the program name).
int run_cli(const std::vector<std::string>& args);

}  // namespace drift
