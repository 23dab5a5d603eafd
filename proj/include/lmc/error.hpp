#pragma once

#include <stdexcept>
#include <string>

namespace lmc {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape disagreement between tensors.
struct DimError : Error {
    using Error::Error;
};

// Class / tag index out of range.
struct LabelError : Error {
    using Error::Error;
};

// Bad hyper-parameter or config file value.
struct ConfigError : Error {
    using Error::Error;
};

// Operation called in a state that does not admit it.
struct StateError : Error {
    using Error::Error;
};

// Malformed file content.
struct ParseError : Error {
    using Error::Error;
};

// Bad runtime input (sequence too long, mismatched lists, ...).
struct InputError : Error {
    using Error::Error;
};

// Stream-level consistency violation.
struct ValidationError : Error {
    using Error::Error;
};

}  // namespace lmc
