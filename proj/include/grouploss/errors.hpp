#pragma once

#include <stdexcept>
#include <string>

namespace grouploss {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-supplied knob is out of its documented range (temperature <= 0,
/// k <= 0, K >= n, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// An input violates a precondition that the caller was responsible for
/// (shape mismatch, negative entry where non-negativity is required,
/// anchor index out of range).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A mini-batch cannot produce a loss (e.g. every row is an anchor) or the
/// sampler cannot satisfy the requested geometry.
class BatchError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; the message carries the line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Filesystem-level failure or a corrupt/incompatible binary payload.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace grouploss
