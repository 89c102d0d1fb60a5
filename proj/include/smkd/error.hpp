#pragma once

#include <stdexcept>
#include <string>

namespace smkd {

// Exception hierarchy. Each family maps onto one CLI exit code
// (see tools/smkd_main.cpp): usage 1, data/format 2, numeric 3.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or rank disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range scalar parameter (temperature <= 0, momentum outside [0,1], ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Violated calling contract, e.g. backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected in a forward pass or loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (checkpoint, CIFAR binary, PPM, split file).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad or missing configuration key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace smkd
