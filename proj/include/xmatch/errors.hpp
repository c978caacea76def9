#pragma once

#include <stdexcept>
#include <string>

namespace xmatch {

/// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents; carries the offending line when known.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what, long line = -1)
      : Error(line >= 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

/// Vector or matrix sizes that do not agree, or identity indices out of range.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint failed its checksum or structural validation.
class ChecksumError : public IoError {
 public:
  using IoError::IoError;
};

/// A loss or intermediate value became non-finite (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An internal invariant was violated, e.g. the correspondence decomposition.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace xmatch
