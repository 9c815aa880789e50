#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace instrgen {

// Entry point of the `instrgen` tool. args excludes the program name.
// Returns the process exit code; library errors become exit code 1 with a
// message on err, usage errors exit code 2.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace instrgen
