#pragma once

#include <istream>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ssdlab/errors.hpp"

namespace ssdlab::hitmodel {

/// Hit probabilities conditioned on the previous round's speculator origin.
struct HitRates {
  double primary = 0.0;
  double backup = 0.0;
};

/**
 * Stationary unconditional hit rate: backup / (1 + backup - primary).
 * This is the limit of the two-state recurrence below; it always lies
 * between the two conditional rates. Throws DivergentError when
 * |primary - backup| >= 1.
 */
double unconditional_phit(const HitRates& rates);

struct RecurrenceResult {
  std::vector<double> iterated;     // p(0..T) by stepping the recurrence
  std::vector<double> closed_form;  // p(0)*d^T + backup*(1-d^T)/(1-d)
};

/**
 * Hit-rate recurrence p(0) = primary, p(T) = p(T-1)*primary +
 * (1-p(T-1))*backup, evaluated both by iteration and by the unrolled
 * closed form. The two sequences agree within 1e-12 at every step.
 */
RecurrenceResult phit_recurrence(const HitRates& rates, int steps);

struct PowerLawFit {
  double exponent = 0.0;       // r in miss = amplitude * F^(-r)
  double log_amplitude = 0.0;  // intercept of the log-log regression
  double r_squared = 1.0;
};

/**
 * Ordinary least squares of log(miss_rate) on log(fan_out). Requires at
 * least two distinct fan-out values (InsufficientDataError otherwise) and
 * miss rates in (0, 1].
 */
PowerLawFit fit_powerlaw(std::span<const std::pair<double, double>> samples);

/// Parses CSV rows "F,miss_rate" (optional header line) and fits.
PowerLawFit fit_powerlaw_csv(std::istream& in);

/// One simulated round: origin of the speculation verified, and whether the
/// subsequent lookup hit.
struct RoundRecord {
  bool primary_origin = true;
  bool hit = false;
};

struct EmpiricalHitRates {
  std::optional<double> primary;  // absent when no primary-origin rounds
  std::optional<double> backup;   // absent when no backup-origin rounds
  double overall = 0.0;
  long primary_rounds = 0;
  long backup_rounds = 0;
};

/// Frequency estimates of the conditional and overall hit rates.
EmpiricalHitRates empirical_hit_rates(std::span<const RoundRecord> log);

}  // namespace ssdlab::hitmodel
