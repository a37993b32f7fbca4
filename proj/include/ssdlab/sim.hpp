#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssdlab/cache.hpp"
#include "ssdlab/hitmodel.hpp"
#include "ssdlab/lm.hpp"
#include "ssdlab/perf.hpp"
#include "ssdlab/specdec.hpp"

namespace ssdlab::sim {

/// Fallback speculator used on a cache miss.
enum class BackupKind {
  SamePrimaryJIT,  // re-draft with the primary model after verification
  FastRandom,      // uniform random tokens with recorded uniform dists
};

/// Source of the per-round hit/miss decision.
enum class HitMode {
  RealCache,     // build the cache and look the outcome up
  SyntheticIid,  // iid Bernoulli(synthetic_hit_rate) coin per sequence-round
};

struct SimConfig {
  std::shared_ptr<const lm::SyntheticLM> target;
  std::shared_ptr<const lm::SyntheticLM> draft;
  int lookahead = 4;
  dist::SamplingScheme scheme = dist::SamplingScheme::standard();
  dist::SamplingScheme target_scheme = dist::SamplingScheme::standard();
  cache::FanOutPlan primary_plan;
  cache::FanOutPlan backup_plan;
  perf::TimingParams timing{0.3, 0.0};
  BackupKind backup_kind = BackupKind::FastRandom;
  HitMode hit_mode = HitMode::RealCache;
  double synthetic_hit_rate = 0.0;
  int batch_size = 1;
  long rounds = 1000;
  std::uint64_t seed = 0;
  // Scales the accept probability inside verification; 1 is faithful.
  // Exists as the negative-control fixture for losslessness checks.
  double accept_scale = 1.0;
  bool keep_streams = true;

  /// Effective backup latency: SamePrimaryJIT re-drafts at primary speed.
  double backup_time() const {
    return backup_kind == BackupKind::SamePrimaryJIT ? timing.primary_time
                                                     : timing.backup_time;
  }
};

struct RunStats {
  long rounds = 0;
  int batch = 1;
  long tokens = 0;
  double virtual_time = 0.0;

  // Lookup tallies keyed by the origin of the speculation just verified.
  long primary_origin_lookups = 0;
  long primary_origin_hits = 0;
  long backup_origin_lookups = 0;
  long backup_origin_hits = 0;

  // Sequence-rounds classified by how their speculation was obtained.
  long hit_rounds = 0;
  long miss_rounds = 0;
  long initial_rounds = 0;  // first-round JIT drafts, excluded from the pools
  long hit_round_tokens = 0;
  long miss_round_tokens = 0;

  double accepted_sum = 0.0;

  std::vector<std::vector<int>> streams;          // emitted tokens per sequence
  std::vector<hitmodel::RoundRecord> round_log;   // lookup events in order

  double speed() const { return static_cast<double>(tokens) / virtual_time; }
  long lookups() const { return primary_origin_lookups + backup_origin_lookups; }
  long hits() const { return primary_origin_hits + backup_origin_hits; }
  double hit_rate() const {
    return lookups() > 0 ? static_cast<double>(hits()) / lookups() : 0.0;
  }
  std::optional<double> hit_rate_primary() const {
    if (primary_origin_lookups == 0) return std::nullopt;
    return static_cast<double>(primary_origin_hits) / primary_origin_lookups;
  }
  std::optional<double> hit_rate_backup() const {
    if (backup_origin_lookups == 0) return std::nullopt;
    return static_cast<double>(backup_origin_hits) / backup_origin_lookups;
  }
  double mean_accepted() const {
    return accepted_sum / static_cast<double>(rounds * batch);
  }
  std::optional<double> mean_hit_tokens() const {
    if (hit_rounds == 0) return std::nullopt;
    return static_cast<double>(hit_round_tokens) / hit_rounds;
  }
  std::optional<double> mean_miss_tokens() const {
    if (miss_rounds == 0) return std::nullopt;
    return static_cast<double>(miss_round_tokens) / miss_rounds;
  }
};

/// Plain autoregressive baseline: one token per unit of virtual time.
RunStats run_ar(const lm::SyntheticLM& target,
                const dist::SamplingScheme& target_scheme, long tokens,
                std::uint64_t seed);

/// Ordinary speculative decoding: draft K, verify, repeat; each round costs
/// 1 + primary_time.
RunStats run_sd(const SimConfig& config);

/// Asynchronous rounds at batch size 1. See run_ssd_batch.
RunStats run_ssd(const SimConfig& config);

/**
 * Asynchronous speculative rounds: each verification is followed by a cache
 * lookup of the realized outcome (cache built against the just-verified
 * speculation with the plan matching its origin). A hit supplies the next
 * speculation for free; a miss defers to the backup. Rounds where every
 * sequence hit cost max(1, primary_time); any miss stalls the whole batch
 * for 1 + backup_time.
 */
RunStats run_ssd_batch(const SimConfig& config);

struct TranscriptMessage {
  long round = 0;
  std::string dir;  // "v2d" | "d2v"
  std::string payload_summary;  // compact JSON
  double vclock = 0.0;
};

struct Transcript {
  std::vector<TranscriptMessage> messages;
  std::string to_jsonl() const;
};

struct RoundTiming {
  double verify_start = 0.0;
  double verify_end = 0.0;
  double cache_ready = 0.0;
  bool all_hit = false;
};

struct HarnessResult {
  Transcript transcript;
  RunStats stats;
  std::vector<RoundTiming> timings;
};

/**
 * Runs the draft and verifier as two logical processes on a deterministic
 * virtual clock, exchanging exactly one message pair per round: the draft
 * sends tokens plus recorded distributions, the verifier returns outcome
 * keys. All cross-process information flows through these messages; the
 * verifier never sees the speculation cache. Cache construction overlaps
 * verification, so with primary_time < 1 the next round's cache is ready
 * before the current verification completes (checked every round).
 */
HarnessResult run_protocol_harness(const SimConfig& config);

}  // namespace ssdlab::sim
