#pragma once

#include <stdexcept>
#include <string>

namespace causaltok {

// Shape mismatches and malformed arguments raise std::invalid_argument,
// out-of-range times raise std::domain_error. The types below cover the
// remaining failure classes.

/// Non-finite values surfaced from a loss or gradient computation.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid or inconsistent configuration (bad field, dimension mismatch
/// between checkpoints, schema violation).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Command-line misuse: unknown mode, missing checkpoint for a suite, ...
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace causaltok
