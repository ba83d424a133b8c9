#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace mhcal {

/// Precondition violated by a caller-supplied argument.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Value outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Operation invoked on an object in the wrong state.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A model evaluation failed or produced non-finite output.
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(const std::string& what, std::vector<double> assignment)
      : std::runtime_error(what), assignment_(std::move(assignment)) {}

  const std::vector<double>& assignment() const noexcept { return assignment_; }

 private:
  std::vector<double> assignment_;
};

/// Config file could not be parsed or failed semantic validation.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mhcal
