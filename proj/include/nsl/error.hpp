#pragma once

#include <stdexcept>
#include <string>

namespace nsl {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor/matrix dimension mismatch. Messages name the offending shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A precondition of an operation was violated (non-scalar loss, nonzero
/// upper triangle passed as a Cholesky factor, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid argument value (out-of-range k, unknown preset id, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Object used before being put into a valid state.
class StateError : public Error {
public:
    using Error::Error;
};

/// Inconsistent model/layer configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed file contents (IDX, checkpoint, config).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A numeric evaluation produced non-finite values.
class EvalError : public Error {
public:
    using Error::Error;
};

}  // namespace nsl
