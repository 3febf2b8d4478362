#pragma once

#include <stdexcept>
#include <string>

namespace covalign {

/// Raised when a caller breaks an operation's documented preconditions
/// (shape mismatch, out-of-range argument, exhausted schedule).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a computation produces or consumes a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing on-disk data (datasets, checkpoints, CSV).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace covalign
