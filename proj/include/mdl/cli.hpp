#pragma once

#include <string>
#include <vector>

namespace mdl {

/// Entry point of the `mdl` tool. Returns the process exit code; errors are
/// printed to stderr.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

std::string version_tag();

}  // namespace mdl
