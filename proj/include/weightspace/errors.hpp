#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace weightspace {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint file handling
struct FormatError : Error {
    using Error::Error;
};
struct UnsupportedDtype : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct InvariantViolation : Error {
    using Error::Error;
};
struct EmptyCollection : Error {
    using Error::Error;
};

// Tokenization
struct EmptyLayer : Error {
    using Error::Error;
};
struct LayoutMismatch : Error {
    using Error::Error;
};

// Numerics / training
struct ConfigError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct DegenerateBatch : Error {
    using Error::Error;
};
struct DegenerateData : Error {
    using Error::Error;
};
struct DegenerateTargets : Error {
    using Error::Error;
};
struct BatchTooSmall : Error {
    using Error::Error;
};
struct EmptySequence : Error {
    using Error::Error;
};
struct EmptySchedule : Error {
    using Error::Error;
};

// Training loss became non-finite; carries the offending step.
struct DivergenceError : Error {
    std::size_t step_index;
    DivergenceError(const std::string& message, std::size_t step)
        : Error(message), step_index(step) {}
};

}  // namespace weightspace
