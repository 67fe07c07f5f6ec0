#pragma once

#include <stdexcept>
#include <string>

namespace deidforge {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (non-scalar loss, missing grad).
class ContractError : public Error {
 public:
  using Error::Error;
};

class InvalidConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidDataError : public Error {
 public:
  using Error::Error;
};

class InvalidParameterError : public Error {
 public:
  using Error::Error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class MissingDonorError : public Error {
 public:
  explicit MissingDonorError(const std::string& donor)
      : Error("unknown donor id '" + donor + "'"), donor_(donor) {}
  const std::string& donor() const noexcept { return donor_; }

 private:
  std::string donor_;
};

class DegenerateLandmarksError : public Error {
 public:
  using Error::Error;
};

class DegenerateTransformError : public Error {
 public:
  using Error::Error;
};

class DegenerateMaskError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint load failures. Each failure mode has its own type so callers can
// tell a foreign file from a damaged one.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CorruptHeaderError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncatedDataError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class UnknownVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace deidforge
