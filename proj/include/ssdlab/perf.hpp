#pragma once

#include "ssdlab/errors.hpp"

namespace ssdlab::perf {

/// Speculator latencies in units of one verification pass.
struct TimingParams {
  double primary_time = 0.0;  // asynchronous pre-speculation
  double backup_time = 0.0;   // post-verification fallback
};

/// Expected tokens per round for each regime, plus the plain-SD reference.
struct TokenYields {
  double hit_tokens = 1.0;   // from a primary (pre-speculated) round
  double miss_tokens = 1.0;  // from a backup round
  double sd_tokens = 1.0;    // from the draft model under ordinary SD
  double sd_time = 0.0;      // draft latency under ordinary SD
};

/**
 * Expected speedup of the asynchronous scheme over autoregressive decoding:
 *
 *   [p*E_hit + (1-p)*E_miss] / [p*max(1, T_primary) + (1-p)*(1 + T_backup)]
 *
 * A hit round costs max(1, T_primary) because pre-speculation overlaps
 * verification; a miss costs 1 + T_backup because the fallback only starts
 * once verification has finished.
 */
double speedup_ssd(double hit_rate, const TokenYields& yields,
                   const TimingParams& timing);

/// Ordinary speculative decoding speedup: tokens / (1 + draft latency).
double speedup_sd(double sd_tokens, double sd_time);

struct Bounds {
  double lower = 0.0;
  double upper = 0.0;
};

/**
 * Bounds on speedup_ssd / speedup_sd in the regime where pre-speculation
 * finishes inside verification (T_primary < 1) and the backup is free
 * (T_backup = 0):
 *
 *   (1 + sd_time) * (hit_tokens / sd_tokens) * hit_rate <= ratio
 *                 <= (1 + sd_time) * (hit_tokens / sd_tokens)
 *
 * Requires hit_tokens >= miss_tokens >= 1; the caller asserts the regime.
 */
Bounds sandwich_bounds(const TokenYields& yields, double hit_rate);

/**
 * Batched speedup: the whole batch waits for the backup whenever any
 * sequence misses, so the denominator uses hit_rate^batch. Approaches
 * numerator / (1 + T_backup) as the batch grows.
 */
double speedup_batch(double hit_rate, const TokenYields& yields,
                     const TimingParams& timing, double batch);

/**
 * Critical batch size where a free backup overtakes re-using the (slow)
 * primary as backup:
 *
 *   b* = log(1 + 1/T_p - E_hit / (T_p * (p*E_hit + (1-p)*E_miss))) / log(p)
 *
 * Below b* the slow backup wins, at or above it the fast one does. Throws
 * NoCrossoverError when one strategy dominates at every batch size (log
 * argument outside (0, 1]).
 */
double critical_batch(double hit_rate, const TokenYields& yields,
                      const TimingParams& timing);

struct OverheadEstimate {
  double draft_tokens_per_round = 0.0;
  double flop_multiplier_vs_sd = 0.0;
  double cache_bits = 0.0;
};

/**
 * Resource accounting for batch B, lookahead K, uniform fan-out F, vocab V:
 * the draft decodes B*K*(K+1)*F tokens per round, costs flop_ratio*(K+1)*F
 * times the drafting FLOPs of ordinary SD, and the outcome-keyed cache holds
 * B*F*K*(K+1)*(V+1) numbers at the declared per-number width.
 */
OverheadEstimate overhead_estimate(double batch, double lookahead,
                                   double fan_out, double vocab,
                                   double flop_ratio,
                                   double number_width_bits = 16.0);

}  // namespace ssdlab::perf
