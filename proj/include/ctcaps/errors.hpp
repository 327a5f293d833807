#pragma once

#include <stdexcept>
#include <string>

namespace ctcaps {

// Shape/dimension contract violations. Messages carry the offending shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: empty batches, non-scalar backward roots, bad thresholds.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Stateful module used out of order (e.g. eval-mode batchnorm before any
// training batch initialized the running statistics).
class StateError : public std::runtime_error {
 public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

// File and format problems: missing files, bad magic, truncation, checksums.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Optimizer refused a step (non-finite gradients or loss).
class OptimizerError : public std::runtime_error {
 public:
  explicit OptimizerError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ctcaps
