#pragma once

#include <stdexcept>
#include <string>

namespace drift {

// Shape or arity violation detected at an op boundary.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller broke an API contract (non-scalar loss, registry mismatch, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid configuration value; message names the violated constraint.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Empty or otherwise unusable input (empty probe set, all-zero profile, ...).
class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Request exceeds a documented compute budget.
class BudgetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Sequence does not fit the model's context window.
class LengthError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Corrupt or mismatched on-disk artifact.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value where the computation requires finite ones.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace drift
