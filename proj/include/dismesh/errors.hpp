#pragma once

#include <stdexcept>
#include <string>

namespace dismesh {

/// Bad input: malformed files, out-of-range parameters, shape mismatches.
/// The CLI maps this family to exit code 1.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Filesystem failures (missing or unwritable paths).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A tensor operation produced NaN or Inf. The message carries the op name.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dismesh
