#pragma once

#include <stdexcept>
#include <string>

namespace effir {

// Precondition or shape-contract violation. Maps to CLI exit code 1 when it
// comes from argument/config handling, otherwise 2.
class ContractError : public std::invalid_argument {
 public:
  explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

// Numeric failure at runtime (divergence, degenerate norms). CLI exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Config file problems. CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Checkpoint refusal: bad version, truncated blob, fingerprint mismatch.
// CLI exit code 2.
class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace effir
