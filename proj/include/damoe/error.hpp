#pragma once

#include <stdexcept>
#include <string>

namespace damoe {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes or axes do not line up.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value (model or run config).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// An internal API contract was violated by the caller.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Index (token id, label, ...) out of range.
struct IndexError : Error {
    explicit IndexError(const std::string& msg) : Error(msg) {}
};

// Unreadable, malformed or empty input data.
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Checkpoint could not be read back (bad magic, version, shapes, truncation).
struct LoadError : DataError {
    explicit LoadError(const std::string& msg) : DataError(msg) {}
};

// Misuse of the command line surface (empty input text, missing arguments).
struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Training hit a non-finite loss and aborted.
struct NumericalAbort : Error {
    explicit NumericalAbort(const std::string& msg) : Error(msg) {}
};

} // namespace damoe
