#pragma once

#include <stdexcept>
#include <string>

namespace scorekit {

/// Base for recoverable runtime failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or out-of-domain input (dimension mismatch, bad value, bad file).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or numerical breakdown.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A linear solve failed (singular or badly conditioned system).
class SolverError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// An estimator could not be fitted.
class FitError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Allocation would exceed the configured memory budget.
class ResourceError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (wrong kernel kind, asymmetric matrix).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace scorekit
