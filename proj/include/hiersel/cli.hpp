#pragma once

#include <string>
#include <vector>

namespace hiersel {

// Entry point shared by the binary and the CLI tests. Returns the process
// exit code: 0 success, 2 config/schema error, 3 guard violation, 4 internal
// invariant breach.
int run_cli(const std::vector<std::string>& args);

} // namespace hiersel
