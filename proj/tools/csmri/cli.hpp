#pragma once

#include <string>
#include <vector>

namespace csmri::cli {

// Entry point behind the csmri binary; returns the process exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args without the program name

}  // namespace csmri::cli
