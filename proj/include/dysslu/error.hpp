#pragma once

#include <stdexcept>
#include <string>

namespace dysslu {

/// Base class for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad caller-supplied argument or configuration value.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or inconsistent file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A training operation was attempted on frozen parameters
/// (or extraction on unfrozen ones).
class FrozenError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure, e.g. a non-finite training loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A protocol precondition was not met (too few utterances, etc).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace dysslu
