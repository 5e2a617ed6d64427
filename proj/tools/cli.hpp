#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace xdk::cli {

// Runs one command. Returns 0 on success, 1 on user error, 2 on internal
// error. Messages go to `err`, results and help text to `out`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace xdk::cli
