#pragma once

#include <stdexcept>
#include <string>

namespace mslae {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration, shape mismatch, bad arguments. Maps to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or encountered during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// File missing, undecodable or unwritable.
class IoError : public Error {
 public:
  using Error::Error;
};

enum class CheckpointErrorKind {
  version_mismatch,
  truncated,
  unknown_tensor,
  shape_mismatch,
  malformed,
};

const char* to_string(CheckpointErrorKind kind);

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

}  // namespace mslae
