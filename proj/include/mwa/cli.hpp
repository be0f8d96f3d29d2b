#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mwa {

/// Runs the mwa command line. args holds argv[1..] in natural order (no
/// program name). Returns the process exit code: 0 on success, 1 on a
/// usage or configuration error, 2 on an assertion/consistency failure or
/// any other runtime error.
int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace mwa
