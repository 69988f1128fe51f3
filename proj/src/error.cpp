#include "mergelab/error.hpp"

namespace mergelab {

const char * to_string(error_kind kind) {
    switch (kind) {
        case error_kind::usage:      return "usage error";
        case error_kind::format:     return "format error";
        case error_kind::validation: return "validation error";
        case error_kind::dtype:      return "dtype error";
        case error_kind::mismatch:   return "mismatch error";
        case error_kind::argument:   return "argument error";
        case error_kind::io:         return "I/O error";
        case error_kind::degenerate: return "degenerate error";
        case error_kind::training:   return "training error";
    }
    return "error";
}

} // namespace mergelab
