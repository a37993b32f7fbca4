#pragma once

#include <stdexcept>
#include <string>

namespace ssdlab {

/// Base class for all recoverable errors raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Weight vector with no positive entry; cannot be normalized.
struct AllZeroError : Error {
  using Error::Error;
};

/// max(target - draft, 0) has zero total mass (draft equals target pointwise).
struct DegenerateResidualError : Error {
  using Error::Error;
};

/// Exact enumeration bounds exceeded (vocab/lookahead/order too large).
struct TooLargeError : Error {
  using Error::Error;
};

/// Fan-out budget below the one-outcome-per-position minimum.
struct BudgetTooSmallError : Error {
  using Error::Error;
};

/// Hit-rate recurrence does not converge (|primary - backup| >= 1).
struct DivergentError : Error {
  using Error::Error;
};

/// Regression input with fewer than two distinct abscissae.
struct InsufficientDataError : Error {
  using Error::Error;
};

/// Calibration target outside the attainable range.
struct UnreachableError : Error {
  using Error::Error;
};

/// The two backup strategies never trade places over batch size.
struct NoCrossoverError : Error {
  using Error::Error;
};

/// Message-count or ordering breach in the draft/verifier exchange.
struct ProtocolViolationError : Error {
  using Error::Error;
};

/// Experiment configuration failed schema validation.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace ssdlab
