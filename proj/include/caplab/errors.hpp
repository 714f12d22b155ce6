#pragma once

#include <stdexcept>
#include <string>

namespace caplab {

// Bad call-site input: shape mismatches, invalid axes, malformed configs.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Operation not legal in the current object state (out-of-order task,
// unfrozen backbone, empty store where one is required).
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures; message carries the failing path.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace caplab
