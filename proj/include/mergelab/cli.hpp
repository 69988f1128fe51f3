#pragma once

#include "mergelab/error.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace mergelab::cli {

// Process exit codes.
enum exit_code : int {
    ok = 0,
    usage = 1,
    invalid = 2, // validation, format, schema or compatibility problems
    numeric = 3, // degenerate statistics, training divergence
};

int exit_code_for(error_kind kind);

// Runs one invocation; args excludes the program name. Machine-readable
// results go to `out`, progress and diagnostics to `err`.
int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err);

} // namespace mergelab::cli
