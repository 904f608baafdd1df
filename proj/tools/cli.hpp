#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace bagforge::cli {

/// Runs one `bagforge` invocation. `args` excludes the program name.
/// Returns 0 on success, 1 on usage/config/domain errors, 2 on I/O or
/// format errors.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parses `key = value` lines; `#` starts a comment, values may be quoted.
std::map<std::string, std::string> parse_config_text(const std::string& text);

}  // namespace bagforge::cli
