#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ssng {

// Invalid numeric input to a kernel (non-finite values, zero norms, bad temperature).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Shapes or settings that cannot be reconciled with the model configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
  ConfigError(const std::string& msg, std::vector<std::string> fields)
      : std::runtime_error(msg), fields_(std::move(fields)) {}

  const std::vector<std::string>& fields() const noexcept { return fields_; }

 private:
  std::vector<std::string> fields_;
};

// Missing, truncated, or corrupt dataset files. `hint()` tells the user what to fetch.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& msg, std::string hint)
      : std::runtime_error(msg), hint_(std::move(hint)) {}
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}

  const std::string& hint() const noexcept { return hint_; }

 private:
  std::string hint_;
};

// Training diverged (NaN/Inf loss). Carries a snapshot of where it happened.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ssng
