#pragma once

#include <span>
#include <vector>

#include "ssdlab/errors.hpp"
#include "ssdlab/rng.hpp"

namespace ssdlab::dist {

/**
 * Probability vector over a finite vocabulary. Entries are nonnegative and
 * sum to 1 within 1e-12; every sampling and verification routine in the
 * project trades in these.
 */
struct Categorical {
  std::vector<double> probs;

  int size() const { return static_cast<int>(probs.size()); }
  double operator[](int i) const { return probs[static_cast<std::size_t>(i)]; }

  friend bool operator==(const Categorical&, const Categorical&) = default;
};

/// Unnormalized log-weights over the vocabulary. Entries must be finite.
struct Logits {
  std::vector<double> values;

  int size() const { return static_cast<int>(values.size()); }
  double operator[](int i) const { return values[static_cast<std::size_t>(i)]; }

  friend bool operator==(const Logits&, const Logits&) = default;
};

/**
 * Maps model logits to a probability distribution.
 *
 * Standard is softmax at the given temperature. Saguaro additionally
 * multiplies the weights of the top `fan_out` logits by `downweight`
 * before normalizing, pushing residual mass onto those tokens. The
 * temperature is applied first, so the down-weighting acts on z / tau.
 */
struct SamplingScheme {
  enum class Kind { Standard, Saguaro };

  Kind kind = Kind::Standard;
  double temperature = 1.0;
  int fan_out = 0;        // Saguaro only; 1 <= fan_out <= vocab
  double downweight = 1.0;  // Saguaro only; in [0, 1]

  static SamplingScheme standard(double temperature = 1.0) {
    return SamplingScheme{Kind::Standard, temperature, 0, 1.0};
  }
  static SamplingScheme saguaro(int fan_out, double downweight,
                                double temperature = 1.0) {
    return SamplingScheme{Kind::Saguaro, temperature, fan_out, downweight};
  }

  friend bool operator==(const SamplingScheme&, const SamplingScheme&) = default;
};

/// True when entries are nonnegative and sum to 1 within `tol`.
bool is_normalized(const Categorical& p, double tol = 1e-12);

/**
 * Scales a nonnegative weight vector to sum to 1.
 * Throws AllZeroError when every entry is zero.
 */
Categorical normalize(std::span<const double> weights);

/**
 * Indices of the `count` largest logits, ties broken by lowest token index.
 * The ordering is total and platform-independent; cache keys depend on it.
 */
std::vector<int> top_indices(const Logits& z, int count);

/// Numerically stable softmax of z / temperature.
Categorical softmax(const Logits& z, double temperature = 1.0);

/// Applies a sampling scheme to logits. See SamplingScheme.
Categorical apply_scheme(const Logits& z, const SamplingScheme& scheme);

/**
 * Normalized positive part of (target - draft): the bonus-token law upon a
 * rejection. Throws DegenerateResidualError when the positive part has zero
 * mass, which only happens when draft == target pointwise; rejection is
 * impossible there, so a throw flags a caller bug rather than a sample path.
 */
Categorical residual(const Categorical& target, const Categorical& draft);

/**
 * Per-token probability that a drafted token is accepted by the verifier:
 * sum_x min(target(x), draft(x)). Also evaluated through the equivalent
 * 1 - L1/2 form; the two routes must agree within 1e-12 or this throws.
 */
double acceptance_rate(const Categorical& target, const Categorical& draft);

/// Draws one index from p. Consumes exactly one uniform from the stream.
int sample(const Categorical& p, rng::Stream& rng);

}  // namespace ssdlab::dist
