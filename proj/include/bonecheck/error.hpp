#pragma once

#include <stdexcept>
#include <string>

namespace bonecheck {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or layer wiring do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value became NaN/Inf, or a numeric precondition failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Corrupt or incompatible file contents (checkpoints, PNGs, CSVs).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Dataset layout or content problems.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace bonecheck
