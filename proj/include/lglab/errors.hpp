#pragma once

#include <stdexcept>
#include <string>

namespace lglab {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit statuses, so keep the hierarchy shallow.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition or contract violation on caller-supplied data.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Patch with (near) zero variance handed to normalized cross-correlation.
class DegeneratePatchError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// An operation produced NaN/Inf. The message names the op or parameter.
class OverflowError : public Error {
 public:
  using Error::Error;
};

// Not enough labeled examples for an attribute-vector strategy.
class InsufficientSupportError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class UnsupportedVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncatedCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ManifestMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace lglab
