#pragma once

#include <stdexcept>
#include <string>

namespace dr {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Input has the wrong shape, range, or type.
struct InvalidInputError : Error {
    explicit InvalidInputError(const std::string& msg) : Error(msg) {}
};

// Operation requires a trained/loaded model.
struct UninitializedModelError : Error {
    explicit UninitializedModelError(const std::string& msg) : Error(msg) {}
};

// A dataset or batch was empty where content is required.
struct EmptyInputError : Error {
    explicit EmptyInputError(const std::string& msg) : Error(msg) {}
};

// Not enough samples to fit statistics.
struct InsufficientDataError : Error {
    explicit InsufficientDataError(const std::string& msg) : Error(msg) {}
};

// Noise schedule construction produced infeasible parameters.
struct InvalidScheduleError : Error {
    explicit InvalidScheduleError(const std::string& msg) : Error(msg) {}
};

// File / serialization problems.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Experiment configuration problems (bad splits, stale hashes, ...).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace dr
