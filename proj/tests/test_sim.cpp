#include <doctest.h>

#include <cmath>

#include "ssdlab/sim.hpp"
#include "ssdlab/stats.hpp"

using namespace ssdlab;
using dist::SamplingScheme;
using specdec::Origin;

namespace {

dist::Logits log_of(std::vector<double> probs) {
  dist::Logits z;
  for (double p : probs) z.values.push_back(std::log(std::max(p, 1e-300)));
  return z;
}

lm::SyntheticLM shift_chain_lm(int vocab, std::uint64_t seed) {
  std::vector<dist::Logits> rows;
  for (int c = 0; c < vocab; ++c) {
    std::vector<double> probs(static_cast<std::size_t>(vocab), 1e-12);
    probs[static_cast<std::size_t>((c + 1) % vocab)] = 1.0;
    rows.push_back(log_of(probs));
  }
  return lm::SyntheticLM(vocab, 1, seed, std::move(rows));
}

sim::SimConfig base_config(int vocab, int order, double alpha, int lookahead,
                           int budget, std::uint64_t seed) {
  sim::SimConfig config;
  auto target = std::make_shared<lm::SyntheticLM>(
      lm::make_lm(vocab, order, 0.5, seed));
  auto pair = lm::calibrate_pair(*target, alpha, rng::derive_seed(seed, 1));
  config.target = target;
  config.draft = std::make_shared<lm::SyntheticLM>(std::move(pair.draft));
  config.lookahead = lookahead;
  config.primary_plan =
      cache::geometric_fanout(alpha, 1.0, lookahead, budget, Origin::Primary);
  config.backup_plan =
      cache::geometric_fanout(0.3, 1.0, lookahead, budget, Origin::Backup);
  config.seed = seed;
  return config;
}

}  // namespace

TEST_CASE("run_ar emits one token per unit of virtual time") {
  const lm::SyntheticLM target = lm::make_lm(8, 1, 0.5, 101);
  const sim::RunStats stats =
      sim::run_ar(target, SamplingScheme::standard(), 100, 7);
  CHECK(stats.tokens == 100);
  CHECK(stats.virtual_time == 100.0);
  CHECK(stats.streams[0].size() == 100);
}

TEST_CASE("run_ar follows a deterministic chain") {
  const lm::SyntheticLM chain = shift_chain_lm(5, 102);
  const sim::RunStats stats =
      sim::run_ar(chain, SamplingScheme::standard(), 10, 8);
  CHECK(stats.streams[0] == std::vector<int>{1, 2, 3, 4, 0, 1, 2, 3, 4, 0});
}

TEST_CASE("run_ar replays identically under the same seed") {
  const lm::SyntheticLM target = lm::make_lm(16, 1, 0.4, 103);
  const sim::RunStats a = sim::run_ar(target, SamplingScheme::standard(), 500, 9);
  const sim::RunStats b = sim::run_ar(target, SamplingScheme::standard(), 500, 9);
  CHECK(a.streams == b.streams);
}

TEST_CASE("run_sd mean emitted matches the closed form at order 0") {
  // Order-0 models have a single conditional, so the acceptance rate is a
  // constant and the capped-geometric expectation is exact.
  sim::SimConfig config;
  auto target = std::make_shared<lm::SyntheticLM>(lm::make_lm(12, 0, 0.6, 104));
  auto draft = std::make_shared<lm::SyntheticLM>(
      lm::derive_draft(*target, 0.35, 105));
  config.target = target;
  config.draft = draft;
  config.lookahead = 4;
  config.rounds = 100000;
  config.seed = 106;
  config.keep_streams = false;
  const sim::RunStats stats = sim::run_sd(config);

  const double alpha = lm::mean_acceptance(*target, *draft);
  const double expected = specdec::expected_tokens(alpha, 4);
  const double mean = static_cast<double>(stats.tokens) / stats.rounds;
  // Conservative spread bound: per-round tokens lie in [1, K+1].
  const double sigma = 0.5 * 4.0 / std::sqrt(static_cast<double>(stats.rounds));
  CHECK(std::abs(mean - expected) < 3.0 * sigma);
}

TEST_CASE("run_sd mean emitted tracks the closed form at order 1") {
  // With context-dependent conditionals the capped-geometric expectation at
  // the visit-weighted acceptance rate is an approximation; it stays within
  // a few percent for mildly heterogeneous rows.
  sim::SimConfig config = base_config(12, 1, 0.8, 4, 10, 130);
  config.rounds = 50000;
  config.keep_streams = false;
  const sim::RunStats stats = sim::run_sd(config);
  const double mean_tokens = static_cast<double>(stats.tokens) / stats.rounds;
  const double alpha = lm::mean_acceptance(*config.target, *config.draft);
  CHECK(std::abs(mean_tokens - specdec::expected_tokens(alpha, 4)) /
            specdec::expected_tokens(alpha, 4) <
        0.03);
}

TEST_CASE("run_sd with free drafting runs at the token yield") {
  sim::SimConfig config = base_config(8, 1, 0.8, 3, 8, 107);
  config.rounds = 5000;
  config.timing = {0.0, 0.0};
  config.keep_streams = false;
  const sim::RunStats stats = sim::run_sd(config);
  CHECK(stats.virtual_time == static_cast<double>(stats.rounds));
  CHECK(stats.speed() ==
        static_cast<double>(stats.tokens) / static_cast<double>(stats.rounds));
}

TEST_CASE("run_sd output is distributionally indistinguishable from run_ar") {
  sim::SimConfig config = base_config(16, 1, 0.75, 4, 16, 108);
  config.rounds = 30000;
  const sim::RunStats sd = sim::run_sd(config);
  const long tokens = 50000;
  REQUIRE(sd.tokens >= tokens);
  const std::vector<int> head(sd.streams[0].begin(),
                              sd.streams[0].begin() + tokens);
  const sim::RunStats ar = sim::run_ar(*config.target,
                                       SamplingScheme::standard(), tokens, 109);
  const auto result = stats::chi_square_two_sample(
      stats::bigram_counts(head, 16), stats::bigram_counts(ar.streams[0], 16));
  CHECK(result.p_value > 0.001);
}

TEST_CASE("exhaustive plans never miss") {
  sim::SimConfig config = base_config(8, 1, 0.7, 3, 8, 110);
  const int vocab = 8;
  // Every possible outcome cached: vocab-1 candidates below the cap,
  // vocab at the all-accepted position.
  std::vector<int> full(static_cast<std::size_t>(config.lookahead) + 1, vocab - 1);
  full.back() = vocab;
  int total = 0;
  for (int f : full) total += f;
  config.primary_plan = cache::FanOutPlan{full, Origin::Primary, total};
  config.backup_plan = cache::FanOutPlan{full, Origin::Backup, total};
  config.rounds = 400;
  config.timing = {0.6, 0.0};
  config.keep_streams = false;
  const sim::RunStats stats = sim::run_ssd(config);
  CHECK(stats.hit_rate() == 1.0);
  CHECK(stats.miss_rounds == 0);
  CHECK(stats.virtual_time ==
        doctest::Approx(1.6 + (stats.rounds - 1) * 1.0).epsilon(1e-12));
}

TEST_CASE("ssd speed matches the speedup formula with measured quantities") {
  sim::SimConfig config = base_config(16, 1, 0.8, 4, 20, 111);
  config.rounds = 20000;
  config.timing = {0.4, 0.0};
  config.backup_kind = sim::BackupKind::FastRandom;
  config.keep_streams = false;
  const sim::RunStats stats = sim::run_ssd(config);
  REQUIRE(stats.hit_rounds > 0);
  REQUIRE(stats.miss_rounds > 0);
  const perf::TokenYields yields{stats.mean_hit_tokens().value(),
                                 stats.mean_miss_tokens().value(), 1.0, 0.0};
  const double analytic =
      perf::speedup_ssd(stats.hit_rate(), yields, {0.4, 0.0});
  CHECK(std::abs(stats.speed() - analytic) / analytic < 0.01);
}

TEST_CASE("ssd with the primary as backup is at least as fast as sd") {
  for (std::uint64_t seed : {200u, 201u, 202u}) {
    sim::SimConfig config = base_config(12, 1, 0.8, 3, 16, seed);
    config.rounds = 20000;
    config.timing = {0.3, 0.3};
    config.backup_kind = sim::BackupKind::SamePrimaryJIT;
    config.keep_streams = false;
    const sim::RunStats ssd = sim::run_ssd(config);
    const sim::RunStats sd = sim::run_sd(config);
    REQUIRE(ssd.hits() > 0);
    CHECK(ssd.speed() >= sd.speed());
  }
}

TEST_CASE("measured conditional hit rates satisfy the stationary closed form") {
  sim::SimConfig config = base_config(12, 1, 0.75, 3, 12, 112);
  config.rounds = 30000;
  config.backup_kind = sim::BackupKind::FastRandom;
  config.keep_streams = false;
  const sim::RunStats stats = sim::run_ssd(config);
  REQUIRE(stats.hit_rate_primary().has_value());
  REQUIRE(stats.hit_rate_backup().has_value());
  const double predicted = hitmodel::unconditional_phit(
      {stats.hit_rate_primary().value(), stats.hit_rate_backup().value()});
  const double sigma = std::sqrt(predicted * (1.0 - predicted) /
                                 static_cast<double>(stats.lookups()));
  CHECK(std::abs(stats.hit_rate() - predicted) < 3.0 * sigma + 1e-4);

  // The round log reproduces the counters.
  const auto empirical = hitmodel::empirical_hit_rates(stats.round_log);
  CHECK(empirical.primary.value() == stats.hit_rate_primary().value());
  CHECK(empirical.backup.value() == stats.hit_rate_backup().value());
  CHECK(empirical.overall == stats.hit_rate());
}

TEST_CASE("batch of one equals the unbatched run") {
  sim::SimConfig config = base_config(10, 1, 0.8, 3, 12, 113);
  config.rounds = 2000;
  const sim::RunStats a = sim::run_ssd(config);
  const sim::RunStats b = sim::run_ssd_batch(config);
  CHECK(a.tokens == b.tokens);
  CHECK(a.virtual_time == b.virtual_time);
  CHECK(a.streams == b.streams);
  CHECK(a.hits() == b.hits());
}

TEST_CASE("ssd runs are deterministic given the seed") {
  sim::SimConfig config = base_config(10, 1, 0.8, 3, 12, 114);
  config.rounds = 3000;
  config.batch_size = 2;
  const sim::RunStats a = sim::run_ssd_batch(config);
  const sim::RunStats b = sim::run_ssd_batch(config);
  CHECK(a.tokens == b.tokens);
  CHECK(a.virtual_time == b.virtual_time);
  CHECK(a.streams == b.streams);
  CHECK(a.primary_origin_hits == b.primary_origin_hits);
  CHECK(a.backup_origin_hits == b.backup_origin_hits);
}

TEST_CASE("batched speed matches the batch formula under iid hits") {
  // The batched-speedup formula assumes iid per-sequence hits; the synthetic
  // mode realizes that assumption exactly, with real token yields.
  struct Params {
    double hit_rate;
    double primary_time;
    int batch;
  };
  for (const Params& params :
       {Params{0.9, 0.25, 4}, Params{0.8, 0.5, 3}, Params{0.7, 0.4, 6}}) {
    sim::SimConfig config = base_config(16, 1, 0.8, 3, 12, 115);
    config.rounds = 100000;
    config.batch_size = params.batch;
    config.timing = {params.primary_time, 0.0};
    config.backup_kind = sim::BackupKind::FastRandom;
    config.hit_mode = sim::HitMode::SyntheticIid;
    config.synthetic_hit_rate = params.hit_rate;
    config.keep_streams = false;
    const sim::RunStats stats = sim::run_ssd_batch(config);
    const perf::TokenYields yields{stats.mean_hit_tokens().value(),
                                   stats.mean_miss_tokens().value(), 1.0, 0.0};
    const double analytic =
        params.batch * perf::speedup_batch(stats.hit_rate(), yields,
                                           {params.primary_time, 0.0},
                                           params.batch);
    CHECK(std::abs(stats.speed() - analytic) / analytic < 0.02);
  }
}

TEST_CASE("any miss stalls the whole batch") {
  sim::SimConfig config = base_config(10, 1, 0.8, 2, 9, 116);
  config.rounds = 4000;
  config.batch_size = 3;
  config.timing = {0.5, 0.0};
  config.hit_mode = sim::HitMode::SyntheticIid;
  config.synthetic_hit_rate = 0.8;
  config.keep_streams = false;
  const sim::RunStats stats = sim::run_ssd_batch(config);
  // Virtual time decomposes into all-hit rounds at 1.0 and stalled rounds
  // at 1 + backup_time = 1; with backup_time 0 both cost 1 after round 1.
  CHECK(stats.virtual_time ==
        doctest::Approx(1.5 + (stats.rounds - 1) * 1.0).epsilon(1e-12));

  config.timing = {0.5, 0.25};
  const sim::RunStats slow = sim::run_ssd_batch(config);
  CHECK(slow.virtual_time > stats.virtual_time);
}

TEST_CASE("order-2 models run end to end") {
  sim::SimConfig config;
  auto target = std::make_shared<lm::SyntheticLM>(lm::make_lm(6, 2, 0.6, 140));
  auto pair = lm::calibrate_pair(*target, 0.85, 141);
  config.target = target;
  config.draft = std::make_shared<lm::SyntheticLM>(std::move(pair.draft));
  config.lookahead = 3;
  config.primary_plan = cache::geometric_fanout(0.85, 1.0, 3, 10,
                                                Origin::Primary);
  config.backup_plan = cache::geometric_fanout(0.3, 1.0, 3, 10, Origin::Backup);
  config.seed = 142;
  config.rounds = 3000;
  const sim::RunStats stats = sim::run_ssd(config);
  CHECK(stats.tokens > 3000);
  CHECK(stats.hits() > 0);
  const sim::RunStats replay = sim::run_ssd(config);
  CHECK(stats.streams == replay.streams);
}

TEST_CASE("protocol harness exchanges one message pair per round") {
  sim::SimConfig config = base_config(10, 1, 0.8, 3, 12, 117);
  config.rounds = 50;
  const sim::HarnessResult result = sim::run_protocol_harness(config);
  CHECK(result.transcript.messages.size() == 100);
  long to_draft = 0;
  long to_verifier = 0;
  for (const auto& message : result.transcript.messages) {
    if (message.dir == "v2d") ++to_draft;
    if (message.dir == "d2v") ++to_verifier;
  }
  CHECK(to_draft == 50);
  CHECK(to_verifier == 50);
  CHECK(result.stats.rounds == 50);
  CHECK(result.stats.tokens > 50);
}

TEST_CASE("protocol harness transcripts replay byte-identically") {
  sim::SimConfig config = base_config(10, 1, 0.8, 3, 12, 118);
  config.rounds = 40;
  const std::string a = sim::run_protocol_harness(config).transcript.to_jsonl();
  const std::string b = sim::run_protocol_harness(config).transcript.to_jsonl();
  CHECK(a == b);
  CHECK(a.find("\"dir\":\"v2d\"") != std::string::npos);
  CHECK(a.find("\"vclock\"") != std::string::npos);
}

TEST_CASE("protocol harness keeps the overlap invariant for fast drafts") {
  sim::SimConfig config = base_config(10, 1, 0.8, 3, 12, 119);
  config.rounds = 60;
  config.timing = {0.7, 0.0};
  const sim::HarnessResult result = sim::run_protocol_harness(config);
  for (const auto& timing : result.timings) {
    CHECK(timing.cache_ready < timing.verify_end);
    CHECK(timing.cache_ready ==
          doctest::Approx(timing.verify_start + 0.7).epsilon(1e-12));
  }
}

TEST_CASE("slow pre-speculation stretches hit rounds to its latency") {
  sim::SimConfig config = base_config(8, 1, 0.7, 2, 8, 120);
  const int vocab = 8;
  std::vector<int> full{vocab - 1, vocab - 1, vocab};
  config.primary_plan = cache::FanOutPlan{full, Origin::Primary, 3 * vocab - 2};
  config.backup_plan = cache::FanOutPlan{full, Origin::Backup, 3 * vocab - 2};
  config.rounds = 30;
  config.timing = {1.2, 0.0};
  const sim::HarnessResult result = sim::run_protocol_harness(config);
  CHECK(result.stats.hit_rate() == 1.0);
  // Every round after the first starts when the previous cache completes.
  CHECK(result.stats.virtual_time ==
        doctest::Approx(1.2 + 1.0 + (config.rounds - 1) * 1.2).epsilon(1e-9));
}

TEST_CASE("protocol harness rejects the synthetic hit mode") {
  sim::SimConfig config = base_config(8, 1, 0.8, 2, 8, 121);
  config.hit_mode = sim::HitMode::SyntheticIid;
  config.synthetic_hit_rate = 0.5;
  CHECK_THROWS_AS(sim::run_protocol_harness(config), Error);
}

TEST_CASE("ssd output stream stays lossless end to end") {
  sim::SimConfig config = base_config(16, 1, 0.75, 4, 20, 122);
  config.rounds = 20000;
  config.backup_kind = sim::BackupKind::FastRandom;
  const sim::RunStats ssd = sim::run_ssd(config);
  const long tokens = 40000;
  REQUIRE(ssd.tokens >= tokens);
  const std::vector<int> head(ssd.streams[0].begin(),
                              ssd.streams[0].begin() + tokens);
  const sim::RunStats ar = sim::run_ar(*config.target,
                                       SamplingScheme::standard(), tokens, 123);
  const auto result = stats::chi_square_two_sample(
      stats::bigram_counts(head, 16), stats::bigram_counts(ar.streams[0], 16));
  CHECK(result.p_value > 0.001);
}

TEST_CASE("ssd stays lossless with the re-drafting backup too") {
  sim::SimConfig config = base_config(16, 1, 0.75, 4, 20, 124);
  config.rounds = 20000;
  config.backup_kind = sim::BackupKind::SamePrimaryJIT;
  config.timing = {0.3, 0.3};
  const sim::RunStats ssd = sim::run_ssd(config);
  const long tokens = 40000;
  REQUIRE(ssd.tokens >= tokens);
  const std::vector<int> head(ssd.streams[0].begin(),
                              ssd.streams[0].begin() + tokens);
  const sim::RunStats ar = sim::run_ar(*config.target,
                                       SamplingScheme::standard(), tokens, 125);
  const auto result = stats::chi_square_two_sample(
      stats::bigram_counts(head, 16), stats::bigram_counts(ar.streams[0], 16));
  CHECK(result.p_value > 0.001);
}

TEST_CASE("corrupted acceptance is detectable in the stream") {
  sim::SimConfig config = base_config(16, 1, 0.75, 4, 20, 122);
  config.rounds = 35000;
  config.backup_kind = sim::BackupKind::FastRandom;
  config.accept_scale = 0.7;
  const sim::RunStats ssd = sim::run_ssd(config);
  const long tokens = 40000;
  REQUIRE(ssd.tokens >= tokens);
  const std::vector<int> head(ssd.streams[0].begin(),
                              ssd.streams[0].begin() + tokens);
  const sim::RunStats ar = sim::run_ar(*config.target,
                                       SamplingScheme::standard(), tokens, 123);
  const auto result = stats::chi_square_two_sample(
      stats::bigram_counts(head, 16), stats::bigram_counts(ar.streams[0], 16));
  CHECK(result.p_value < 0.001);
}
