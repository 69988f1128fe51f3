#pragma once

#include <stdexcept>
#include <string>

namespace mergelab {

// Every library failure maps onto one of these kinds; the CLI turns the kind
// into its exit code.
enum class error_kind {
    usage,       // bad command line
    format,      // malformed file contents
    validation,  // well-formed but invalid data (NaN, bad schema value)
    dtype,       // unsupported on-disk dtype
    mismatch,    // incompatible checkpoints
    argument,    // precondition violated by a caller
    io,          // filesystem failure
    degenerate,  // numerically undefined result (zero variance, zero matrix)
    training,    // divergence during toy training
};

class error : public std::runtime_error {
public:
    error(error_kind kind, const std::string & what) : std::runtime_error(what), kind_(kind) {}
    error_kind kind() const noexcept { return kind_; }

private:
    error_kind kind_;
};

[[noreturn]] inline void fail(error_kind kind, const std::string & what) {
    throw error(kind, what);
}

const char * to_string(error_kind kind);

} // namespace mergelab
