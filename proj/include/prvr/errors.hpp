#pragma once

#include <stdexcept>
#include <string>

namespace prvr {

// Base for everything thrown by this library. Subclasses map onto the CLI
// exit codes: input/shape/format problems -> 2, numerical failures -> 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/operand shapes do not line up.
struct DimensionError : Error {
  using Error::Error;
};

// A numeric parameter is outside its valid range (temperature <= 0, ...).
struct ParameterError : Error {
  using Error::Error;
};

// Zero-norm vectors, zero-variance distributions and similar inputs that
// make the requested quantity undefined.
struct DegenerateInputError : Error {
  using Error::Error;
};

// Batch-level inconsistencies: mismatched list lengths, too few videos.
struct BatchError : Error {
  using Error::Error;
};

// An API contract was violated (non-scalar loss, model/dataset mismatch).
struct ContractError : Error {
  using Error::Error;
};

// Malformed manifest or config JSON.
struct ParseError : Error {
  using Error::Error;
};

// Binary feature/checkpoint files that fail validation.
struct FormatError : Error {
  using Error::Error;
};

// Dataset-level problems (missing annotation, unknown id).
struct DataError : Error {
  using Error::Error;
};

// Invalid training configuration (empty splits, bad branch setup).
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem failures, always carrying the offending path.
struct IoError : Error {
  using Error::Error;
};

// Training produced a non-finite loss; carries the offending batch ids.
struct NumericalError : Error {
  using Error::Error;
};

}  // namespace prvr
