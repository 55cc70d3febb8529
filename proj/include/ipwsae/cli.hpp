#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace ipwsae {

std::uint64_t fnv1a64(std::string_view s);

// Runs one command line; `args` excludes the program name. Returns the exit
// code: 0 success, 1 user or data error, 2 numerical failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ipwsae
