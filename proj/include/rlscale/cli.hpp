#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace rlscale {

// Command-line front end. args excludes the program name. Returns 0 on success, 1 on a
// configuration error and 2 on a runtime error.
int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rlscale
