#pragma once

#include <stdexcept>
#include <string>

namespace rgbdyn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: shapes, ranges, malformed files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or failed numerical procedures.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class BehindCameraError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Dataset container errors; each is reported with its own status code.
class MissingTensorError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeMismatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DtypeMismatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace rgbdyn
