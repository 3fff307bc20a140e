#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bnsieve {

/// Root of every error thrown by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape mismatch; the message names the operation and the offending shapes.
struct DimensionError : Error {
    using Error::Error;
};

/// A forward or finite-difference evaluation produced NaN/Inf.
struct OverflowError : Error {
    using Error::Error;
};

/// Caller broke an operation precondition.
struct ContractError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct FormatError : Error {
    FormatError(const std::string& what, std::size_t byte_offset)
        : Error(what + " (at byte offset " + std::to_string(byte_offset) + ")"), offset(byte_offset) {}
    std::size_t offset;
};

struct TrainingError : Error {
    TrainingError(const std::string& what, std::size_t epoch_index)
        : Error(what + " (epoch " + std::to_string(epoch_index) + ")"), epoch(epoch_index) {}
    std::size_t epoch;
};

struct CraftingError : Error {
    CraftingError(const std::string& what, std::size_t iteration_index)
        : Error(what + " (iteration " + std::to_string(iteration_index) + ")"), iteration(iteration_index) {}
    std::size_t iteration;
};

}  // namespace bnsieve
