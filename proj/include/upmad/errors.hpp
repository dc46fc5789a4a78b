#pragma once

#include <stdexcept>
#include <string>

namespace upmad {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when a forward op on finite inputs produced NaN/Inf, or a loss diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

// A metric that has no defined value for its inputs (e.g. Hausdorff with an empty mask).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace upmad
