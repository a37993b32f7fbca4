#include "ssdlab/perf.hpp"

#include <algorithm>
#include <cmath>

namespace ssdlab::perf {

namespace {

void check_hit_rate(double hit_rate) {
  if (!(hit_rate >= 0.0) || !(hit_rate <= 1.0)) {
    throw Error("perf: hit_rate must be in [0, 1]");
  }
}

}  // namespace

double speedup_ssd(double hit_rate, const TokenYields& yields,
                   const TimingParams& timing) {
  check_hit_rate(hit_rate);
  const double tokens =
      hit_rate * yields.hit_tokens + (1.0 - hit_rate) * yields.miss_tokens;
  const double latency = hit_rate * std::max(1.0, timing.primary_time) +
                         (1.0 - hit_rate) * (1.0 + timing.backup_time);
  return tokens / latency;
}

double speedup_sd(double sd_tokens, double sd_time) {
  if (!(sd_tokens >= 1.0)) throw Error("speedup_sd: tokens must be >= 1");
  if (!(sd_time >= 0.0)) throw Error("speedup_sd: time must be >= 0");
  return sd_tokens / (1.0 + sd_time);
}

Bounds sandwich_bounds(const TokenYields& yields, double hit_rate) {
  check_hit_rate(hit_rate);
  if (!(yields.hit_tokens >= yields.miss_tokens) || !(yields.miss_tokens >= 1.0)) {
    throw Error("sandwich_bounds: requires hit_tokens >= miss_tokens >= 1");
  }
  const double scale =
      (1.0 + yields.sd_time) * yields.hit_tokens / yields.sd_tokens;
  return Bounds{scale * hit_rate, scale};
}

double speedup_batch(double hit_rate, const TokenYields& yields,
                     const TimingParams& timing, double batch) {
  check_hit_rate(hit_rate);
  if (!(batch >= 1.0)) throw Error("speedup_batch: batch must be >= 1");
  const double tokens =
      hit_rate * yields.hit_tokens + (1.0 - hit_rate) * yields.miss_tokens;
  const double all_hit = std::pow(hit_rate, batch);
  const double latency = all_hit * std::max(1.0, timing.primary_time) +
                         (1.0 - all_hit) * (1.0 + timing.backup_time);
  return tokens / latency;
}

double critical_batch(double hit_rate, const TokenYields& yields,
                      const TimingParams& timing) {
  if (!(hit_rate > 0.0) || !(hit_rate < 1.0)) {
    throw Error("critical_batch: hit_rate must be in (0, 1)");
  }
  if (!(timing.primary_time > 0.0)) {
    throw Error("critical_batch: primary_time must be > 0");
  }
  const double mean_tokens =
      hit_rate * yields.hit_tokens + (1.0 - hit_rate) * yields.miss_tokens;
  const double argument = 1.0 + 1.0 / timing.primary_time -
                          yields.hit_tokens / (timing.primary_time * mean_tokens);
  if (!(argument > 0.0) || argument > 1.0) {
    throw NoCrossoverError(
        "critical_batch: one backup strategy dominates at every batch size");
  }
  return std::log(argument) / std::log(hit_rate);
}

OverheadEstimate overhead_estimate(double batch, double lookahead,
                                   double fan_out, double vocab,
                                   double flop_ratio, double number_width_bits) {
  for (double v : {batch, lookahead, fan_out, vocab, flop_ratio, number_width_bits}) {
    if (!(v > 0.0)) throw Error("overhead_estimate: all inputs must be positive");
  }
  OverheadEstimate out;
  out.draft_tokens_per_round = batch * lookahead * (lookahead + 1.0) * fan_out;
  out.flop_multiplier_vs_sd = flop_ratio * (lookahead + 1.0) * fan_out;
  out.cache_bits = batch * fan_out * lookahead * (lookahead + 1.0) *
                   (vocab + 1.0) * number_width_bits;
  return out;
}

}  // namespace ssdlab::perf
