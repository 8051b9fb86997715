#pragma once

#include <stdexcept>
#include <string>

namespace senm {

// Violated precondition on an argument (shape mismatch, negative weight, ...).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad or inconsistent configuration. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing, unreadable or insufficient data. Maps to CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss during training. Maps to CLI exit code 4.
class NumericalAbort : public std::runtime_error {
 public:
  NumericalAbort(const std::string& what, std::string snapshot_path)
      : std::runtime_error(what), snapshot_path_(std::move(snapshot_path)) {}

  const std::string& snapshot_path() const noexcept { return snapshot_path_; }

 private:
  std::string snapshot_path_;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace detail
}  // namespace senm
