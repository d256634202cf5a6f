#pragma once

#include <stdexcept>
#include <string>

namespace cfe {

// Base for every error raised by the library. The CLI maps ConfigError and
// its subclasses to exit code 2 and everything else to exit code 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidSpec : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class IngestionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class ProtocolViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace cfe
