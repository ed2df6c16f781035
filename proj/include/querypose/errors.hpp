#pragma once

#include <stdexcept>
#include <string>

namespace querypose {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor or container shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Degenerate boxes and other invalid coordinates.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed datasets, missing files, bad annotation records.
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// A checkpoint whose stored config disagrees with the model it is loaded into.
class ConfigConflictError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace querypose
