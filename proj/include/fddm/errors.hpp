#pragma once

#include <stdexcept>
#include <string>

namespace fddm {

// Base class for all library errors. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Grid/tensor shape violations (odd dimensions, mismatched bands, ...).
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error("dimension: " + msg) {}
};

// Out-of-range or inconsistent numeric parameters.
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& msg) : Error("parameter: " + msg) {}
};

// Invalid network or run configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

// Violated call contract between modules (misaligned conditioning, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract: " + msg) {}
};

// Filesystem and serialization failures.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

// Checksum mismatch or malformed payload in a persisted file.
class CorruptionError : public IoError {
 public:
  explicit CorruptionError(const std::string& msg) : IoError("corrupt: " + msg) {}
};

// Persisted format version does not match what this build reads.
class VersionError : public IoError {
 public:
  explicit VersionError(const std::string& msg) : IoError("version: " + msg) {}
};

// Non-finite losses or other numeric breakdown during training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};

// Phantom geometry placement failed after bounded retries.
class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& msg) : Error("generation: " + msg) {}
};

}  // namespace fddm
