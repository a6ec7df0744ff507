#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace retr::cli {

// Bad flags, bad config values or missing input files; exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string_view build_id();

/// Runs one command line (without the program name) and returns the exit
/// code: 0 success, 1 runtime failure, 2 usage or validation error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace retr::cli
