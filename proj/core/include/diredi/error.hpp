#pragma once

#include <stdexcept>
#include <string>

namespace diredi {

// Error categories surfaced by the library. The CLI maps each to its own
// process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Archive integrity failures. Kept distinct so callers can tell a damaged
// transfer from a model that simply does not fit.
class ChecksumError : public IoError {
 public:
  using IoError::IoError;
};

class TruncationError : public IoError {
 public:
  using IoError::IoError;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class DigestMismatchError : public Error {
 public:
  using Error::Error;
};

class GateFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace diredi
