#pragma once

#include <stdexcept>
#include <string>

namespace cutpost {

/// Base class for every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments, malformed configuration or data that violates a
/// documented invariant.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Pathological numerical state: non-finite loss values, solver failure,
/// indefinite curvature, too many failed conditional stages.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File system or parse failure while reading or writing artifacts.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cutpost
