#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace crlhf::cli {

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

/// Reads the process environment.
std::optional<std::string> process_env(const std::string& name);

/// args excludes the program name. Returns the process exit code; errors are
/// written to `err` as one JSON line {"error": ..., "message": ...}.
int run(std::vector<std::string> args, std::ostream& out, std::ostream& err,
        const EnvLookup& env = process_env);

}  // namespace crlhf::cli
