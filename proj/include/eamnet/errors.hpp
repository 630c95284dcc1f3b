#pragma once

#include <stdexcept>
#include <string>

namespace eamnet {

/// Tensor shapes that do not fit an operation's contract.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Hyperparameters that violate a configuration invariant.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Values outside an operation's domain (degenerate maps, non-binary masks, ...).
struct InvalidInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Missing, unreadable, or inconsistent files on disk.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised by the trainer when the loss stops being finite.
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace eamnet
