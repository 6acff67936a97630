#pragma once

#include <stdexcept>
#include <string>

namespace logitguard {

// Base for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Operand shapes incompatible (wrong rank, wrong extent, odd pool input, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required, or numeric divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Class index or table lookup out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Objective not reachable on the tape / not a scalar.
class GraphError : public Error {
 public:
  using Error::Error;
};

// Malformed file. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  explicit FormatError(const std::string& what) : Error(what), offset_(0) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Checkpoint/file version this build does not understand.
class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Invalid configuration (hyperparameters, specs, run configs).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset content violates its invariants (label range, pixel range, size mismatch).
class DataError : public Error {
 public:
  using Error::Error;
};

// Threshold fitting impossible (too few samples, degenerate distribution).
class CalibrationError : public Error {
 public:
  using Error::Error;
};

// Training failed (divergence, NaN loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

// A coverage/metric input is outside the formula's domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage's required upstream artifact is missing.
class DependencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace logitguard
