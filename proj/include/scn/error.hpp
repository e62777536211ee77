#pragma once

#include <stdexcept>
#include <string>

namespace scn {

// Root of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not agree with what an operation expects.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An argument is outside its documented domain (bad stride, bad index, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// A computation produced or was given a non-finite / singular quantity.
class NumericError : public Error {
 public:
  using Error::Error;
};

// On-disk data (dataset, checkpoint, report) is malformed or inconsistent.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A configuration file or value failed validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace scn
