#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "ssdlab/lm.hpp"
#include "ssdlab/specdec.hpp"

namespace ssdlab::cache {

/**
 * Per-position outcome budget F_0..F_K: how many candidate bonus tokens to
 * pre-speculate for at each accepted-prefix length. Tagged with the role it
 * serves: the plan used when the speculation under verification came from
 * the primary speculator, or from the backup.
 */
struct FanOutPlan {
  std::vector<int> fan_out;
  specdec::Origin role = specdec::Origin::Primary;
  int budget = 0;

  int lookahead() const { return static_cast<int>(fan_out.size()) - 1; }
  int total() const;
};

/// Continuous (pre-rounding) optimum of the fan-out allocation.
struct ContinuousPlan {
  std::vector<double> fan_out;
};

/**
 * Power-law miss model per speculator role: the chance of a miss at a
 * position with fan-out F is F^(-r). Exponents must be positive; they are
 * fitted from empirical miss data, never assumed.
 */
struct HitRateModel {
  double primary_exponent = 1.0;
  double backup_exponent = 1.0;

  double exponent_for(specdec::Origin role) const {
    return role == specdec::Origin::Primary ? primary_exponent
                                            : backup_exponent;
  }
};

/**
 * Continuous optimum of the cache-hit objective under a total budget, for a
 * speculator with the given acceptance rate and power-law miss exponent:
 * F_k = F_0 * a^(k/(1+r)) for k < K, with the last position scaled by
 * (1-a)^(-1/(1+r)), and F_0 chosen so the entries sum exactly to the budget.
 */
ContinuousPlan geometric_fanout_continuous(double acceptance, double exponent,
                                           int lookahead, double budget);

/**
 * Integer plan: the continuous optimum rounded by largest fractional
 * remainder (ties to the lower position), then floored at one outcome per
 * position. Always sums exactly to the budget. Throws BudgetTooSmallError
 * when budget < lookahead + 1.
 */
FanOutPlan geometric_fanout(double acceptance, double exponent, int lookahead,
                            int budget,
                            specdec::Origin role = specdec::Origin::Primary);

/// Budget spread evenly over positions, earlier positions taking remainders.
FanOutPlan uniform_fanout(int lookahead, int budget,
                          specdec::Origin role = specdec::Origin::Primary);

/**
 * Maximum relative deviation of a continuous plan from the Lagrange
 * stationarity conditions of the constrained hit-rate maximization
 * (marginal hit gain at position k must equal a^(-k) times the gain at
 * position 0, with the all-accepted position carrying an extra 1-a factor).
 * The closed-form geometric plan scores ~0.
 */
double lagrange_residual(const ContinuousPlan& plan, double acceptance,
                         double exponent);

/**
 * Model-predicted hit rate of a plan: sum over accepted-length k of the
 * capped-geometric weight a^k(1-a) (a^K at the cap) times the power-law
 * per-position hit probability 1 - F_k^(-r). Positions with F_k < 1
 * contribute zero (no candidates, no hit).
 */
double conditional_hit_rate(const FanOutPlan& plan, double acceptance,
                            double exponent);
double conditional_hit_rate(std::span<const int> fan_out, double acceptance,
                            double exponent);

/**
 * Hit-rate predictor for the down-weighted scheme: given a rejection at a
 * position with target law q and draft logits z, the probability that the
 * bonus token lands inside the top-`fan_out` set of z when the draft samples
 * through sigma_{F,C}. Computed exactly from residual masses inside/outside
 * the top set; returns 1 when the residual has zero mass. Nonincreasing in C.
 */
double in_cache_residual_fraction(const dist::Categorical& target,
                                  const dist::Logits& draft_logits, int fan_out,
                                  double downweight, double temperature = 1.0);

/**
 * Exact conditional hit rate of the candidate rule at a single position:
 * conditioned on a rejection, the probability that the bonus token lies in
 * the top-`fan_out` tokens of `ranking_logits` excluding the rejected token.
 * Requires nonzero rejection mass.
 */
double exact_rejection_hit_rate(const dist::Categorical& target,
                                const dist::Categorical& draft,
                                const dist::Logits& ranking_logits,
                                int fan_out);

/// Outcome-keyed store of pre-drafted speculations for one round.
class SpeculationCache {
 public:
  using Map = std::unordered_map<specdec::VerificationOutcome,
                                 specdec::Speculation, specdec::OutcomeHash>;

  SpeculationCache(Map entries, specdec::Origin round_origin)
      : entries_(std::move(entries)), round_origin_(round_origin) {}

  /// Hit: pointer to the stored speculation. Miss: nullptr.
  const specdec::Speculation* lookup(const specdec::VerificationOutcome& v) const {
    const auto it = entries_.find(v);
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const Map& entries() const { return entries_; }
  specdec::Origin round_origin() const { return round_origin_; }

 private:
  Map entries_;
  specdec::Origin round_origin_;
};

/**
 * Builds the speculation cache for the round that verifies
 * `spec_under_verification` (drafted from `context`). For each position k,
 * the candidate bonus tokens are the top-F_k draft logits at that position;
 * for k < K the token actually sent for verification is excluded (it can
 * never be the bonus token), and candidates are ranked by the raw draft
 * logits rather than the down-weighted distribution. Each entry holds a
 * fresh `next_lookahead`-token primary speculation for the continuation.
 *
 * Entry construction draws one base value from `rng` and gives every entry
 * its own derived stream, so entries are independent of construction order.
 */
SpeculationCache build_cache(const lm::SyntheticLM& draft_lm,
                             std::span<const int> context,
                             const specdec::Speculation& spec_under_verification,
                             const FanOutPlan& plan,
                             const dist::SamplingScheme& scheme,
                             int next_lookahead, rng::Stream& rng);

}  // namespace ssdlab::cache
