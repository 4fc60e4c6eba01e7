#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace slimunet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration, plan or run description failed validation. Carries every
/// violation found, not just the first one.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::vector<std::string> violations)
      : Error(what + format(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  static std::string format(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }
  std::vector<std::string> violations_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

/// Requested pruning fraction exceeds what the candidate set can remove.
class CapacityError : public Error {
 public:
  CapacityError(const std::string& what, double achievable)
      : Error(what), achievable_(achievable) {}
  double achievable() const noexcept { return achievable_; }

 private:
  double achievable_;
};

/// Training diverged (NaN/Inf loss).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace slimunet
