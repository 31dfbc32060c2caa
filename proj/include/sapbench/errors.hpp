#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sap {

// Failure taxonomy. Exit codes used by the CLI: 2 config, 3 data,
// 4 numeric, 5 internal invariant breach.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
    virtual int exit_code() const noexcept { return 5; }
};

// Shape or dimension contract violated.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Argument value outside the operation's domain.
class InputError : public Error {
public:
    using Error::Error;
};

// Object used in a state that forbids the operation (e.g. a consumed tape).
class StateError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

// Malformed tensor file; message carries the byte offset of the defect.
class FormatError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

// Training diverged; remembers the epoch where the loss went non-finite.
class TrainingError : public NumericError {
public:
    TrainingError(const std::string& msg, std::size_t epoch)
        : NumericError(msg + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

class InternalError : public Error {
public:
    using Error::Error;
};

}  // namespace sap
