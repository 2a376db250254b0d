#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dsdlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitCheckFailed = 3;

// Entry point of the dsdlab tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dsdlab
