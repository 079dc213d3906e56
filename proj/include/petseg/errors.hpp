#pragma once

#include <stdexcept>
#include <string>

namespace petseg {

// Exit-code mapping for the CLI: contract/config -> 1, io/format -> 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller violated a documented precondition or an invariant was broken.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Bad configuration value (invalid patch size, malformed run config, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Filesystem-level failures: missing file, unwritable path.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// File exists but does not parse or carries illegal values.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Synthetic data could not be generated under the given spec.
class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& msg) : Error(msg) {}
};

}  // namespace petseg
