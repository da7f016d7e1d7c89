#pragma once

#include <stdexcept>
#include <string>

namespace csmri {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mismatched tensor/image dimensions.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration value (bad ratio, non-integer conv output, ...).
struct ConfigError : Error {
  using Error::Error;
};

// A caller broke an API contract (non-scalar loss, missing gradient, ...).
struct ContractError : Error {
  using Error::Error;
};

// File system / serialization failures.
struct IoError : Error {
  using Error::Error;
};

// Stage-2 loss calibration could not be established.
struct CalibrationError : Error {
  using Error::Error;
};

}  // namespace csmri
