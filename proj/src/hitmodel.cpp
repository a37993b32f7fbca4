#include "ssdlab/hitmodel.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <string>

namespace ssdlab::hitmodel {

namespace {

void check_rates(const HitRates& rates) {
  if (!(rates.primary >= 0.0) || !(rates.primary <= 1.0) ||
      !(rates.backup >= 0.0) || !(rates.backup <= 1.0)) {
    throw Error("hitmodel: rates must be in [0, 1]");
  }
}

}  // namespace

double unconditional_phit(const HitRates& rates) {
  check_rates(rates);
  if (std::abs(rates.primary - rates.backup) >= 1.0) {
    throw DivergentError("unconditional_phit: |primary - backup| >= 1");
  }
  const double value = rates.backup / (1.0 + rates.backup - rates.primary);
  const double lo = std::min(rates.primary, rates.backup);
  const double hi = std::max(rates.primary, rates.backup);
  // The stationary rate is a convex combination of the two conditionals;
  // clamp away any floating-point spill.
  return std::clamp(value, lo, hi);
}

RecurrenceResult phit_recurrence(const HitRates& rates, int steps) {
  check_rates(rates);
  if (steps < 0) throw Error("phit_recurrence: steps must be >= 0");
  RecurrenceResult out;
  out.iterated.reserve(static_cast<std::size_t>(steps) + 1);
  out.closed_form.reserve(static_cast<std::size_t>(steps) + 1);

  const double decay = rates.primary - rates.backup;
  double current = rates.primary;
  double decay_power = 1.0;
  for (int t = 0; t <= steps; ++t) {
    out.iterated.push_back(current);
    double closed;
    if (decay == 1.0) {
      // Degenerate pair (primary=1, backup=0): the geometric sum becomes t.
      closed = rates.primary + rates.backup * t;
    } else {
      closed = rates.primary * decay_power +
               rates.backup * (1.0 - decay_power) / (1.0 - decay);
    }
    out.closed_form.push_back(closed);
    if (std::abs(closed - current) > 1e-12) {
      throw Error("phit_recurrence: iteration and closed form disagree");
    }
    current = current * rates.primary + (1.0 - current) * rates.backup;
    decay_power *= decay;
  }
  return out;
}

PowerLawFit fit_powerlaw(std::span<const std::pair<double, double>> samples) {
  std::set<double> distinct;
  for (const auto& [fan_out, miss] : samples) {
    if (!(fan_out >= 1.0)) {
      throw Error("fit_powerlaw: fan-out values must be >= 1");
    }
    if (!(miss > 0.0) || !(miss <= 1.0)) {
      throw Error("fit_powerlaw: miss rates must be in (0, 1]");
    }
    distinct.insert(fan_out);
  }
  if (distinct.size() < 2) {
    throw InsufficientDataError(
        "fit_powerlaw: need at least two distinct fan-out values");
  }
  const double n = static_cast<double>(samples.size());
  double mean_x = 0.0;
  double mean_y = 0.0;
  for (const auto& [fan_out, miss] : samples) {
    mean_x += std::log(fan_out);
    mean_y += std::log(miss);
  }
  mean_x /= n;
  mean_y /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (const auto& [fan_out, miss] : samples) {
    const double dx = std::log(fan_out) - mean_x;
    const double dy = std::log(miss) - mean_y;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  const double slope = sxy / sxx;
  PowerLawFit fit;
  fit.exponent = -slope;
  fit.log_amplitude = mean_y - slope * mean_x;
  const double ss_res = syy - slope * sxy;
  fit.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

PowerLawFit fit_powerlaw_csv(std::istream& in) {
  std::vector<std::pair<double, double>> samples;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw Error("fit_powerlaw_csv: expected rows of the form F,miss_rate");
    }
    try {
      samples.emplace_back(std::stod(line.substr(0, comma)),
                           std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      if (first) {
        first = false;  // header line
        continue;
      }
      throw Error("fit_powerlaw_csv: malformed row: " + line);
    }
    first = false;
  }
  return fit_powerlaw(samples);
}

EmpiricalHitRates empirical_hit_rates(std::span<const RoundRecord> log) {
  if (log.empty()) throw Error("empirical_hit_rates: empty log");
  EmpiricalHitRates out;
  long primary_hits = 0;
  long backup_hits = 0;
  long hits = 0;
  for (const RoundRecord& record : log) {
    if (record.primary_origin) {
      ++out.primary_rounds;
      primary_hits += record.hit ? 1 : 0;
    } else {
      ++out.backup_rounds;
      backup_hits += record.hit ? 1 : 0;
    }
    hits += record.hit ? 1 : 0;
  }
  if (out.primary_rounds > 0) {
    out.primary = static_cast<double>(primary_hits) / out.primary_rounds;
  }
  if (out.backup_rounds > 0) {
    out.backup = static_cast<double>(backup_hits) / out.backup_rounds;
  }
  out.overall = static_cast<double>(hits) / static_cast<double>(log.size());
  return out;
}

}  // namespace ssdlab::hitmodel
