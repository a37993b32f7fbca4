#include "ssdlab/sim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace ssdlab::sim {

namespace {

std::span<const int> tail(const std::vector<int>& history, int order) {
  return std::span<const int>(history).last(static_cast<std::size_t>(order));
}

void validate(const SimConfig& config) {
  if (!config.target || !config.draft) {
    throw Error("sim: target and draft models are required");
  }
  if (config.target->vocab_size() != config.draft->vocab_size() ||
      config.target->order() != config.draft->order()) {
    throw Error("sim: target and draft shapes differ");
  }
  if (config.lookahead < 1) throw Error("sim: lookahead must be >= 1");
  if (config.rounds < 1) throw Error("sim: rounds must be >= 1");
  if (config.batch_size < 1) throw Error("sim: batch_size must be >= 1");
  if (config.hit_mode == HitMode::SyntheticIid &&
      (!(config.synthetic_hit_rate >= 0.0) ||
       !(config.synthetic_hit_rate <= 1.0))) {
    throw Error("sim: synthetic_hit_rate must be in [0, 1]");
  }
}

specdec::Speculation uniform_speculation(int vocab, int lookahead,
                                         rng::Stream& rng) {
  specdec::Speculation spec;
  spec.origin = specdec::Origin::Backup;
  const dist::Categorical uniform{
      std::vector<double>(static_cast<std::size_t>(vocab), 1.0 / vocab)};
  spec.tokens.reserve(static_cast<std::size_t>(lookahead));
  spec.draft_dists.reserve(static_cast<std::size_t>(lookahead));
  for (int i = 0; i < lookahead; ++i) {
    spec.tokens.push_back(dist::sample(uniform, rng));
    spec.draft_dists.push_back(uniform);
  }
  return spec;
}

// How a sequence obtained the speculation it is about to verify.
enum class SpecSource { Initial, CacheHit, Backup };

struct SequenceState {
  rng::Stream rng;
  std::vector<int> history;  // order zeros followed by emitted tokens
  specdec::Speculation spec;
  SpecSource source = SpecSource::Initial;

  explicit SequenceState(std::uint64_t seed) : rng(seed) {}
};

}  // namespace

RunStats run_ar(const lm::SyntheticLM& target,
                const dist::SamplingScheme& target_scheme, long tokens,
                std::uint64_t seed) {
  if (tokens < 1) throw Error("run_ar: tokens must be >= 1");
  rng::Stream rng(rng::derive_seed(seed, 0));
  std::vector<int> history(static_cast<std::size_t>(target.order()), 0);
  RunStats stats;
  stats.rounds = tokens;
  stats.batch = 1;
  stats.streams.resize(1);
  stats.streams[0].reserve(static_cast<std::size_t>(tokens));
  for (long i = 0; i < tokens; ++i) {
    const dist::Categorical p =
        dist::apply_scheme(target.logits_at(tail(history, target.order())),
                           target_scheme);
    const int token = dist::sample(p, rng);
    history.push_back(token);
    stats.streams[0].push_back(token);
  }
  stats.tokens = tokens;
  stats.virtual_time = static_cast<double>(tokens);
  return stats;
}

RunStats run_sd(const SimConfig& config) {
  validate(config);
  if (config.batch_size != 1) throw Error("run_sd: batch_size must be 1");
  const lm::SyntheticLM& target = *config.target;
  const lm::SyntheticLM& draft_lm = *config.draft;
  SequenceState seq(rng::derive_seed(config.seed, 0));
  seq.history.assign(static_cast<std::size_t>(target.order()), 0);

  RunStats stats;
  stats.rounds = config.rounds;
  stats.batch = 1;
  stats.streams.resize(1);
  const specdec::VerifyOptions verify_options{config.target_scheme,
                                              config.accept_scale};
  for (long round = 0; round < config.rounds; ++round) {
    const specdec::Speculation spec =
        specdec::draft(draft_lm, tail(seq.history, draft_lm.order()),
                       config.lookahead, config.scheme, seq.rng);
    const specdec::RoundResult result =
        specdec::verify(target, tail(seq.history, target.order()), spec,
                        seq.rng, verify_options);
    stats.tokens += static_cast<long>(result.emitted.size());
    stats.accepted_sum += result.outcome.accepted;
    seq.history.insert(seq.history.end(), result.emitted.begin(),
                       result.emitted.end());
    if (config.keep_streams) {
      stats.streams[0].insert(stats.streams[0].end(), result.emitted.begin(),
                              result.emitted.end());
    }
  }
  stats.virtual_time =
      static_cast<double>(config.rounds) * (1.0 + config.timing.primary_time);
  return stats;
}

RunStats run_ssd(const SimConfig& config) {
  if (config.batch_size != 1) throw Error("run_ssd: batch_size must be 1");
  return run_ssd_batch(config);
}

RunStats run_ssd_batch(const SimConfig& config) {
  validate(config);
  const lm::SyntheticLM& target = *config.target;
  const lm::SyntheticLM& draft_lm = *config.draft;
  const int batch = config.batch_size;
  const int lookahead = config.lookahead;
  const int order = target.order();
  const double backup_time = config.backup_time();
  const specdec::VerifyOptions verify_options{config.target_scheme,
                                              config.accept_scale};

  std::vector<SequenceState> sequences;
  sequences.reserve(static_cast<std::size_t>(batch));
  for (int j = 0; j < batch; ++j) {
    sequences.emplace_back(rng::derive_seed(config.seed, static_cast<std::uint64_t>(j)));
    sequences.back().history.assign(static_cast<std::size_t>(order), 0);
    sequences.back().spec = specdec::draft(
        draft_lm, tail(sequences.back().history, order), lookahead,
        config.scheme, sequences.back().rng, specdec::Origin::Primary);
    sequences.back().source = SpecSource::Initial;
  }

  RunStats stats;
  stats.rounds = config.rounds;
  stats.batch = batch;
  stats.streams.resize(static_cast<std::size_t>(batch));

  // Round 1 verifies speculations drafted synchronously up front.
  stats.virtual_time = 1.0 + config.timing.primary_time;
  bool previous_all_hit = true;

  for (long round = 1; round <= config.rounds; ++round) {
    if (round > 1) {
      stats.virtual_time += previous_all_hit
                                ? std::max(1.0, config.timing.primary_time)
                                : 1.0 + backup_time;
    }
    bool all_hit = true;
    for (int j = 0; j < batch; ++j) {
      SequenceState& seq = sequences[static_cast<std::size_t>(j)];
      const specdec::RoundResult result =
          specdec::verify(target, tail(seq.history, order), seq.spec, seq.rng,
                          verify_options);
      const long emitted = static_cast<long>(result.emitted.size());
      stats.tokens += emitted;
      stats.accepted_sum += result.outcome.accepted;
      switch (seq.source) {
        case SpecSource::Initial:
          ++stats.initial_rounds;
          break;
        case SpecSource::CacheHit:
          ++stats.hit_rounds;
          stats.hit_round_tokens += emitted;
          break;
        case SpecSource::Backup:
          ++stats.miss_rounds;
          stats.miss_round_tokens += emitted;
          break;
      }

      if (round < config.rounds) {
        bool hit = false;
        specdec::Speculation next;
        if (config.hit_mode == HitMode::SyntheticIid) {
          hit = seq.rng.next_uniform() < config.synthetic_hit_rate;
        } else {
          const cache::FanOutPlan& plan =
              seq.spec.origin == specdec::Origin::Primary ? config.primary_plan
                                                          : config.backup_plan;
          const cache::SpeculationCache round_cache = cache::build_cache(
              draft_lm, tail(seq.history, order), seq.spec, plan, config.scheme,
              lookahead, seq.rng);
          if (const specdec::Speculation* found =
                  round_cache.lookup(result.outcome)) {
            hit = true;
            next = *found;
          }
        }
        const bool primary_origin = seq.spec.origin == specdec::Origin::Primary;
        if (primary_origin) {
          ++stats.primary_origin_lookups;
          stats.primary_origin_hits += hit ? 1 : 0;
        } else {
          ++stats.backup_origin_lookups;
          stats.backup_origin_hits += hit ? 1 : 0;
        }
        stats.round_log.push_back(hitmodel::RoundRecord{primary_origin, hit});

        seq.history.insert(seq.history.end(), result.emitted.begin(),
                           result.emitted.end());
        if (hit) {
          if (config.hit_mode == HitMode::SyntheticIid) {
            next = specdec::draft(draft_lm, tail(seq.history, order), lookahead,
                                  config.scheme, seq.rng,
                                  specdec::Origin::Primary);
          }
          next.origin = specdec::Origin::Primary;
          seq.spec = std::move(next);
          seq.source = SpecSource::CacheHit;
        } else {
          all_hit = false;
          if (config.backup_kind == BackupKind::SamePrimaryJIT) {
            seq.spec = specdec::draft(draft_lm, tail(seq.history, order),
                                      lookahead, config.scheme, seq.rng,
                                      specdec::Origin::Backup);
          } else {
            seq.spec = uniform_speculation(target.vocab_size(), lookahead, seq.rng);
          }
          seq.source = SpecSource::Backup;
        }
      } else {
        seq.history.insert(seq.history.end(), result.emitted.begin(),
                           result.emitted.end());
      }
      if (config.keep_streams) {
        auto& stream = stats.streams[static_cast<std::size_t>(j)];
        stream.insert(stream.end(), result.emitted.begin(), result.emitted.end());
      }
    }
    previous_all_hit = all_hit;
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Protocol harness
// ---------------------------------------------------------------------------

namespace {

struct OutcomeMessage {
  std::vector<specdec::VerificationOutcome> outcomes;
  std::vector<long> sequence_lengths;
};

struct SpeculationMessage {
  std::vector<std::uint8_t> hit_bitmap;
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<dist::Categorical>> dists;
};

/// Transcript-recording channel; enforces one alternating message pair per
/// round (draft speaks first).
class Channel {
 public:
  explicit Channel(Transcript& transcript) : transcript_(transcript) {}

  void send_speculations(const SpeculationMessage& msg, double vclock) {
    if (d2v_sent_ != v2d_sent_) {
      throw ProtocolViolationError("protocol: draft sent out of turn");
    }
    ++d2v_sent_;
    nlohmann::json summary;
    summary["hits"] = msg.hit_bitmap;
    summary["tokens"] = msg.tokens;
    summary["dists_shape"] = {msg.dists.empty() ? 0 : msg.dists[0].size(),
                              msg.dists.empty() || msg.dists[0].empty()
                                  ? 0
                                  : msg.dists[0][0].probs.size()};
    record(d2v_sent_, "d2v", summary, vclock);
  }

  void send_outcomes(const OutcomeMessage& msg, double vclock) {
    if (v2d_sent_ + 1 != d2v_sent_) {
      throw ProtocolViolationError("protocol: verifier sent out of turn");
    }
    ++v2d_sent_;
    nlohmann::json summary;
    nlohmann::json outcomes = nlohmann::json::array();
    for (const auto& outcome : msg.outcomes) {
      outcomes.push_back({outcome.accepted, outcome.bonus});
    }
    summary["outcomes"] = std::move(outcomes);
    summary["seq_lens"] = msg.sequence_lengths;
    record(v2d_sent_, "v2d", summary, vclock);
  }

  long pairs() const { return v2d_sent_; }

 private:
  void record(long round, const char* dir, const nlohmann::json& summary,
              double vclock) {
    transcript_.messages.push_back(
        TranscriptMessage{round, dir, summary.dump(), vclock});
  }

  Transcript& transcript_;
  long d2v_sent_ = 0;
  long v2d_sent_ = 0;
};

/// Verifier side: owns the target model and the emitted streams. Its only
/// inputs are SpeculationMessages; it has no view of the cache.
class VerifierProcess {
 public:
  VerifierProcess(const lm::SyntheticLM& target,
                  const specdec::VerifyOptions& options, int batch,
                  std::uint64_t seed)
      : target_(target), options_(options) {
    for (int j = 0; j < batch; ++j) {
      rngs_.emplace_back(rng::derive_seed(seed, static_cast<std::uint64_t>(j)));
      histories_.emplace_back(static_cast<std::size_t>(target.order()), 0);
    }
  }

  OutcomeMessage verify_round(const SpeculationMessage& msg) {
    OutcomeMessage out;
    for (std::size_t j = 0; j < rngs_.size(); ++j) {
      specdec::Speculation spec;
      spec.tokens = msg.tokens[j];
      spec.draft_dists = msg.dists[j];
      const specdec::RoundResult result =
          specdec::verify(target_, tail(histories_[j], target_.order()), spec,
                          rngs_[j], options_);
      histories_[j].insert(histories_[j].end(), result.emitted.begin(),
                           result.emitted.end());
      tokens_ += static_cast<long>(result.emitted.size());
      accepted_sum_ += result.outcome.accepted;
      out.outcomes.push_back(result.outcome);
      out.sequence_lengths.push_back(
          static_cast<long>(histories_[j].size()) - target_.order());
    }
    return out;
  }

  long tokens() const { return tokens_; }
  double accepted_sum() const { return accepted_sum_; }
  std::vector<std::vector<int>> take_streams() {
    std::vector<std::vector<int>> out;
    for (auto& history : histories_) {
      out.emplace_back(history.begin() + target_.order(), history.end());
    }
    return out;
  }

 private:
  const lm::SyntheticLM& target_;
  specdec::VerifyOptions options_;
  std::vector<rng::Stream> rngs_;
  std::vector<std::vector<int>> histories_;
  long tokens_ = 0;
  double accepted_sum_ = 0.0;
};

/// Draft side: owns the draft model, the speculation caches and the backup
/// strategy. Learns outcomes only through OutcomeMessages.
class DraftProcess {
 public:
  DraftProcess(const SimConfig& config)
      : config_(config), draft_(*config.draft) {
    for (int j = 0; j < config.batch_size; ++j) {
      rngs_.emplace_back(rng::derive_seed(config.seed,
                                          static_cast<std::uint64_t>(j)));
      histories_.emplace_back(static_cast<std::size_t>(draft_.order()), 0);
    }
    specs_.resize(static_cast<std::size_t>(config.batch_size));
    sources_.assign(static_cast<std::size_t>(config.batch_size),
                    SpecSource::Initial);
  }

  /// Initial synchronous drafts; costs primary_time on the draft clock.
  SpeculationMessage initial_speculations() {
    SpeculationMessage msg;
    for (std::size_t j = 0; j < rngs_.size(); ++j) {
      specs_[j] = specdec::draft(draft_, tail(histories_[j], draft_.order()),
                                 config_.lookahead, config_.scheme, rngs_[j],
                                 specdec::Origin::Primary);
      sources_[j] = SpecSource::Initial;
      msg.hit_bitmap.push_back(0);
      msg.tokens.push_back(specs_[j].tokens);
      msg.dists.push_back(specs_[j].draft_dists);
    }
    return msg;
  }

  /// Pre-speculation overlapped with verification of the in-flight round.
  void build_round_caches() {
    caches_.clear();
    for (std::size_t j = 0; j < rngs_.size(); ++j) {
      const cache::FanOutPlan& plan =
          specs_[j].origin == specdec::Origin::Primary ? config_.primary_plan
                                                       : config_.backup_plan;
      caches_.push_back(cache::build_cache(
          draft_, tail(histories_[j], draft_.order()), specs_[j], plan,
          config_.scheme, config_.lookahead, rngs_[j]));
    }
  }

  /// Cache lookups plus backup drafting; returns the next round's message
  /// and whether every sequence hit.
  std::pair<SpeculationMessage, bool> handle_outcomes(const OutcomeMessage& msg) {
    SpeculationMessage next;
    bool all_hit = true;
    for (std::size_t j = 0; j < rngs_.size(); ++j) {
      const specdec::VerificationOutcome outcome = msg.outcomes[j];
      const specdec::Speculation* found = caches_[j].lookup(outcome);
      const bool hit = found != nullptr;
      const bool primary_origin = specs_[j].origin == specdec::Origin::Primary;
      round_log_.push_back(hitmodel::RoundRecord{primary_origin, hit});
      if (primary_origin) {
        ++primary_origin_lookups_;
        primary_origin_hits_ += hit ? 1 : 0;
      } else {
        ++backup_origin_lookups_;
        backup_origin_hits_ += hit ? 1 : 0;
      }

      // Reconstruct the emitted tokens from the outcome key: the accepted
      // prefix of our own speculation plus the bonus token.
      histories_[j].insert(
          histories_[j].end(), specs_[j].tokens.begin(),
          specs_[j].tokens.begin() + outcome.accepted);
      histories_[j].push_back(outcome.bonus);

      if (hit) {
        specs_[j] = *found;
        specs_[j].origin = specdec::Origin::Primary;
        sources_[j] = SpecSource::CacheHit;
      } else {
        all_hit = false;
        if (config_.backup_kind == BackupKind::SamePrimaryJIT) {
          specs_[j] = specdec::draft(draft_, tail(histories_[j], draft_.order()),
                                     config_.lookahead, config_.scheme, rngs_[j],
                                     specdec::Origin::Backup);
        } else {
          specs_[j] = uniform_speculation(draft_.vocab_size(), config_.lookahead,
                                          rngs_[j]);
        }
        sources_[j] = SpecSource::Backup;
      }
      next.hit_bitmap.push_back(hit ? 1 : 0);
      next.tokens.push_back(specs_[j].tokens);
      next.dists.push_back(specs_[j].draft_dists);
    }
    return {std::move(next), all_hit};
  }

  const std::vector<SpecSource>& sources() const { return sources_; }
  const std::vector<hitmodel::RoundRecord>& round_log() const { return round_log_; }
  long primary_origin_lookups() const { return primary_origin_lookups_; }
  long primary_origin_hits() const { return primary_origin_hits_; }
  long backup_origin_lookups() const { return backup_origin_lookups_; }
  long backup_origin_hits() const { return backup_origin_hits_; }

 private:
  const SimConfig& config_;
  const lm::SyntheticLM& draft_;
  std::vector<rng::Stream> rngs_;
  std::vector<std::vector<int>> histories_;
  std::vector<specdec::Speculation> specs_;
  std::vector<SpecSource> sources_;
  std::vector<cache::SpeculationCache> caches_;
  std::vector<hitmodel::RoundRecord> round_log_;
  long primary_origin_lookups_ = 0;
  long primary_origin_hits_ = 0;
  long backup_origin_lookups_ = 0;
  long backup_origin_hits_ = 0;
};

}  // namespace

std::string Transcript::to_jsonl() const {
  std::ostringstream out;
  for (const TranscriptMessage& msg : messages) {
    nlohmann::json line;
    line["round"] = msg.round;
    line["dir"] = msg.dir;
    line["payload_summary"] = nlohmann::json::parse(msg.payload_summary);
    line["vclock"] = msg.vclock;
    out << line.dump() << "\n";
  }
  return out.str();
}

HarnessResult run_protocol_harness(const SimConfig& config) {
  validate(config);
  if (config.hit_mode != HitMode::RealCache) {
    throw Error("run_protocol_harness: requires the real cache hit mode");
  }
  const double backup_time = config.backup_time();
  const specdec::VerifyOptions verify_options{config.target_scheme,
                                              config.accept_scale};

  HarnessResult result;
  Channel channel(result.transcript);
  // The two processes share nothing; the verifier draws its streams from a
  // distinct branch of the seed so draft-side consumption cannot leak in.
  DraftProcess draft_side(config);
  VerifierProcess verifier_side(*config.target, verify_options,
                                config.batch_size,
                                rng::derive_seed(config.seed, 0x5EED));

  // Per-round token attribution by speculation source.
  long hit_rounds = 0, miss_rounds = 0, initial_rounds = 0;
  long hit_round_tokens = 0, miss_round_tokens = 0;

  double clock = config.timing.primary_time;  // initial synchronous draft
  SpeculationMessage in_flight = draft_side.initial_speculations();
  channel.send_speculations(in_flight, clock);

  for (long round = 1; round <= config.rounds; ++round) {
    const double verify_start = clock;
    const double verify_end = verify_start + 1.0;
    // Pre-speculation for the next round runs on the draft device while the
    // verifier works on this one.
    draft_side.build_round_caches();
    const double cache_ready = verify_start + config.timing.primary_time;
    if (config.timing.primary_time < 1.0 && cache_ready >= verify_end) {
      throw ProtocolViolationError("protocol: cache missed the overlap window");
    }

    const OutcomeMessage outcomes = verifier_side.verify_round(in_flight);
    channel.send_outcomes(outcomes, verify_end);

    // Attribute this round's tokens to the source of each speculation.
    {
      const auto& sources = draft_side.sources();
      for (std::size_t j = 0; j < sources.size(); ++j) {
        const long per_seq = outcomes.outcomes[j].accepted + 1;
        switch (sources[j]) {
          case SpecSource::Initial:
            ++initial_rounds;
            break;
          case SpecSource::CacheHit:
            ++hit_rounds;
            hit_round_tokens += per_seq;
            break;
          case SpecSource::Backup:
            ++miss_rounds;
            miss_round_tokens += per_seq;
            break;
        }
      }
    }

    bool all_hit = false;
    if (round < config.rounds) {
      auto [next, hit_everywhere] = draft_side.handle_outcomes(outcomes);
      all_hit = hit_everywhere;
      const double respond_at =
          all_hit ? std::max(verify_end, cache_ready) : verify_end + backup_time;
      channel.send_speculations(next, respond_at);
      in_flight = std::move(next);
      clock = respond_at;
    } else {
      clock = verify_end;
    }
    result.timings.push_back(
        RoundTiming{verify_start, verify_end, cache_ready, all_hit});
  }

  if (channel.pairs() != config.rounds) {
    throw ProtocolViolationError("protocol: message pair count mismatch");
  }

  RunStats& stats = result.stats;
  stats.rounds = config.rounds;
  stats.batch = config.batch_size;
  stats.tokens = verifier_side.tokens();
  stats.virtual_time = clock;
  stats.accepted_sum = verifier_side.accepted_sum();
  stats.primary_origin_lookups = draft_side.primary_origin_lookups();
  stats.primary_origin_hits = draft_side.primary_origin_hits();
  stats.backup_origin_lookups = draft_side.backup_origin_lookups();
  stats.backup_origin_hits = draft_side.backup_origin_hits();
  stats.hit_rounds = hit_rounds;
  stats.miss_rounds = miss_rounds;
  stats.initial_rounds = initial_rounds;
  stats.hit_round_tokens = hit_round_tokens;
  stats.miss_round_tokens = miss_round_tokens;
  stats.round_log = draft_side.round_log();
  if (config.keep_streams) stats.streams = verifier_side.take_streams();
  return result;
}

}  // namespace ssdlab::sim
