#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace vistok::cli {

enum ExitCode : int { kOk = 0, kOperational = 1, kInvariant = 2 };

// args excludes the program name. Metrics JSON goes to out, diagnostics to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vistok::cli
