#pragma once

#include <stdexcept>
#include <string>

namespace czsl {

// Base class for all engine errors. Subclasses map to CLI exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration: unknown keys, invalid values, malformed overrides.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: malformed files, missing ids, split violations.
class DataError : public Error {
 public:
  using Error::Error;
};

// An operation was called outside its contract (wrong target index,
// non-scalar backward root, empty candidate set, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Tensor shape mismatch; message names the op and the offending shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered, or an update step hit non-finite values.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Mathematically degenerate input, e.g. a zero-norm vector fed to cosine.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

}  // namespace czsl
