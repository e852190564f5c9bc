#pragma once

#include <stdexcept>
#include <string>

namespace cdfsl {

// Error taxonomy used across the library. Everything derives from Error so
// callers can catch broadly; the CLI maps specific types to exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// Shape/dimension mismatches between tensors.
class ShapeError : public ValidationError {
 public:
  explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Structural disagreement between containers that must stay aligned
// (parameter name sets, head widths, digests).
class ConsistencyError : public Error {
 public:
  explicit ConsistencyError(const std::string& msg) : Error(msg) {}
};

// Requested more than the data can provide (classes, clips, shots).
class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& msg) : Error(msg) {}
};

// Training diverged or aborted.
class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& msg) : Error(msg) {}
};

// A test oracle could not run (e.g. non-deterministic function under check).
class OracleError : public Error {
 public:
  explicit OracleError(const std::string& msg) : Error(msg) {}
};

// Bad or unparsable configuration.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A pipeline stage was requested before its prerequisite artifact exists.
class MissingDependencyError : public Error {
 public:
  explicit MissingDependencyError(const std::string& msg) : Error(msg) {}
};

}  // namespace cdfsl
