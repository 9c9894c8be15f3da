#pragma once

#include <stdexcept>
#include <string>

namespace nsbert {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not fit an operation's signature.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input data (CSV files, label maps, window sets).
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace nsbert
