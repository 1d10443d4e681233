#pragma once

#include <stdexcept>
#include <string>

namespace sineseg {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Shapes, dims or channel counts that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Input violates an operation's precondition (value ranges, modality, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace sineseg
