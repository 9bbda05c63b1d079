#pragma once

#include <stdexcept>
#include <string>

namespace regconsist {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// File contents do not match the expected on-disk layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Raster or tensor shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition on an argument was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Configuration rejected (schema, unknown keys, bad values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was run before one of its upstream stages.
class DependencyError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace regconsist
