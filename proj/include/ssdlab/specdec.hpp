#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "ssdlab/categorical.hpp"
#include "ssdlab/lm.hpp"

namespace ssdlab::specdec {

/// Which speculator produced a speculation.
enum class Origin { Primary, Backup };

/**
 * A drafted token sequence of length K together with the exact per-position
 * distributions the tokens were sampled from (post-scheme). Verification
 * computes acceptance ratios against these recorded distributions, which is
 * what keeps the output lossless under any draft sampling scheme.
 */
struct Speculation {
  std::vector<int> tokens;
  std::vector<dist::Categorical> draft_dists;
  Origin origin = Origin::Primary;

  int lookahead() const { return static_cast<int>(tokens.size()); }
};

/// Accepted-prefix length plus the bonus token; the unit of cache keying.
struct VerificationOutcome {
  int accepted = 0;
  int bonus = 0;

  friend bool operator==(const VerificationOutcome&,
                         const VerificationOutcome&) = default;
  friend auto operator<=>(const VerificationOutcome&,
                          const VerificationOutcome&) = default;
};

struct OutcomeHash {
  std::size_t operator()(const VerificationOutcome& v) const {
    return static_cast<std::size_t>(v.accepted) * 0x9E3779B97F4A7C15ull +
           static_cast<std::size_t>(v.bonus);
  }
};

/// One verification round: outcome plus the k+1 emitted tokens.
struct RoundResult {
  VerificationOutcome outcome;
  std::vector<int> emitted;
};

/**
 * Drafts `lookahead` tokens autoregressively from the model under the given
 * scheme, recording each post-scheme distribution. One uniform is consumed
 * per position.
 */
Speculation draft(const lm::SyntheticLM& draft_lm, std::span<const int> context,
                  int lookahead, const dist::SamplingScheme& scheme,
                  rng::Stream& rng, Origin origin = Origin::Primary);

struct VerifyOptions {
  dist::SamplingScheme target_scheme = dist::SamplingScheme::standard();
  // Scales the per-token accept probability. Any value other than 1 breaks
  // losslessness; exists as a negative-control fixture for the lossless
  // verification report.
  double accept_scale = 1.0;
};

/**
 * Verifies a speculation against the target model: tokens are accepted
 * sequentially with probability min(1, target/draft); on the first rejection
 * the bonus token comes from the residual distribution at that position, and
 * when all tokens are accepted it comes from the target at the next position.
 * Emits the accepted prefix plus the bonus token (always k+1 >= 1 tokens).
 *
 * Stream consumption order is fixed: one accept coin per position until the
 * round ends, then one draw for the bonus token.
 */
RoundResult verify(const lm::SyntheticLM& target_lm, std::span<const int> context,
                   const Speculation& spec, rng::Stream& rng,
                   const VerifyOptions& options = {});

/// Exact distribution over emitted sequences for one round.
using RoundDistribution = std::map<std::vector<int>, double>;

/**
 * Enumerates every draft path, accept pattern and bonus draw to produce the
 * exact probability of each possible emitted sequence. Feasible only at
 * desk scale; throws TooLargeError beyond vocab 32, lookahead 3, order 1.
 */
RoundDistribution exact_round_distribution(
    const lm::SyntheticLM& target_lm, const lm::SyntheticLM& draft_lm,
    std::span<const int> context, int lookahead,
    const dist::SamplingScheme& scheme,
    const dist::SamplingScheme& target_scheme = dist::SamplingScheme::standard());

/**
 * Marginal law of the first `length` tokens of the emitted stream, where a
 * round shorter than `length` is extended by exact sampling from the target
 * chain. Losslessness says this must equal the target chain rule for every
 * length up to lookahead + 1.
 */
RoundDistribution prefix_process(
    const RoundDistribution& round, const lm::SyntheticLM& target_lm,
    std::span<const int> context, int length,
    const dist::SamplingScheme& target_scheme = dist::SamplingScheme::standard());

/**
 * Max over prefix lengths 1..lookahead+1 of the total-variation distance
 * between the emitted-prefix process and the target chain rule.
 */
double losslessness_tv(
    const lm::SyntheticLM& target_lm, const lm::SyntheticLM& draft_lm,
    std::span<const int> context, int lookahead,
    const dist::SamplingScheme& scheme,
    const dist::SamplingScheme& target_scheme = dist::SamplingScheme::standard());

/**
 * Expected emitted tokens per round at constant acceptance rate alpha:
 * (1 - alpha^(K+1)) / (1 - alpha), with alpha = 1 giving K + 1.
 */
double expected_tokens(double alpha, int lookahead);

}  // namespace ssdlab::specdec
