#pragma once

#include <stdexcept>
#include <string>

namespace spritz {

/// Invalid or inconsistent configuration (bad flag values, bad attack
/// parameters, malformed experiment config).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor/graph shape mismatch detected at build or execution time.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite values produced during graph execution or training.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input data (CSV rows, dataset files).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable, corrupt, or mismatched model checkpoint.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace spritz
