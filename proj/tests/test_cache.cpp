#include <doctest.h>

#include <cmath>
#include <functional>

#include "ssdlab/cache.hpp"

using namespace ssdlab;
using dist::Categorical;
using dist::Logits;
using dist::SamplingScheme;
using specdec::Origin;
using specdec::VerificationOutcome;

namespace {

Logits log_of(std::vector<double> probs) {
  Logits z;
  for (double p : probs) z.values.push_back(std::log(std::max(p, 1e-300)));
  return z;
}

lm::SyntheticLM single_row_lm(std::vector<double> probs, std::uint64_t seed) {
  const int vocab = static_cast<int>(probs.size());
  std::vector<dist::Logits> rows{log_of(std::move(probs))};
  return lm::SyntheticLM(vocab, 0, seed, std::move(rows));
}

// Exhaustive integer optimum over plans with at least one outcome per
// position (the power-law model's domain).
double brute_force_optimum(double acceptance, double exponent, int lookahead,
                           int budget) {
  std::vector<int> plan(static_cast<std::size_t>(lookahead) + 1, 1);
  double best = 0.0;
  std::function<void(int, int)> assign = [&](int position, int remaining) {
    if (position == lookahead) {
      plan[static_cast<std::size_t>(position)] = remaining;
      best = std::max(best, cache::conditional_hit_rate(plan, acceptance, exponent));
      return;
    }
    for (int f = 1; f <= remaining - (lookahead - position); ++f) {
      plan[static_cast<std::size_t>(position)] = f;
      assign(position + 1, remaining - f);
    }
  };
  assign(0, budget);
  return best;
}

}  // namespace

TEST_CASE("continuous geometric plan matches the closed form") {
  // a=0.5, r=1, K=2, B=20.
  const cache::ContinuousPlan plan =
      cache::geometric_fanout_continuous(0.5, 1.0, 2, 20.0);
  const double expected_first =
      20.0 / (0.5 * std::pow(0.5, -0.5) + 0.5 / (1.0 - std::sqrt(0.5)));
  CHECK(std::abs(plan.fan_out[0] - expected_first) < 1e-9);
  CHECK(std::abs(plan.fan_out[1] - expected_first * std::sqrt(0.5)) < 1e-9);
  double total = 0.0;
  for (double f : plan.fan_out) total += f;
  CHECK(std::abs(total - 20.0) < 1e-9);
}

TEST_CASE("continuous plan sums to the budget across parameters") {
  for (double a : {0.3, 0.6, 0.9}) {
    for (double r : {0.5, 1.0, 2.0}) {
      for (int lookahead : {1, 2, 4}) {
        const cache::ContinuousPlan plan =
            cache::geometric_fanout_continuous(a, r, lookahead, 37.0);
        double total = 0.0;
        for (double f : plan.fan_out) total += f;
        CHECK(std::abs(total - 37.0) < 1e-9);
        // Entries strictly decrease before the capped last position.
        for (int k = 0; k + 1 < lookahead; ++k) {
          CHECK(plan.fan_out[static_cast<std::size_t>(k)] >
                plan.fan_out[static_cast<std::size_t>(k) + 1]);
        }
      }
    }
  }
}

TEST_CASE("huge exponent flattens the plan to uniform") {
  const cache::FanOutPlan plan = cache::geometric_fanout(0.5, 1e6, 2, 20, Origin::Primary);
  for (int f : plan.fan_out) CHECK(std::abs(f - 20.0 / 3.0) <= 1.0);
  CHECK(plan.total() == 20);
}

TEST_CASE("rounded plan sums exactly to the budget") {
  rng::Stream rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const double a = 0.05 + 0.9 * rng.next_uniform();
    const double r = 0.2 + 2.0 * rng.next_uniform();
    const int lookahead = 1 + static_cast<int>(rng.next_uniform() * 5);
    const int budget =
        lookahead + 1 + static_cast<int>(rng.next_uniform() * 40);
    const cache::FanOutPlan plan =
        cache::geometric_fanout(a, r, lookahead, budget, Origin::Primary);
    CHECK(plan.total() == budget);
    for (int f : plan.fan_out) CHECK(f >= 1);
  }
}

TEST_CASE("budget below one per position is rejected") {
  CHECK_THROWS_AS(cache::geometric_fanout(0.5, 1.0, 2, 2, Origin::Primary),
                  BudgetTooSmallError);
  CHECK_THROWS_AS(cache::uniform_fanout(3, 3), BudgetTooSmallError);
}

TEST_CASE("lagrange residual vanishes on the closed form") {
  for (double a : {0.3, 0.6, 0.9}) {
    for (double r : {0.5, 1.0, 2.0}) {
      const cache::ContinuousPlan plan =
          cache::geometric_fanout_continuous(a, r, 3, 24.0);
      CHECK(cache::lagrange_residual(plan, a, r) < 1e-9);
    }
  }
}

TEST_CASE("lagrange residual flags non-optimal plans") {
  const cache::ContinuousPlan uniform{{20.0 / 3.0, 20.0 / 3.0, 20.0 / 3.0}};
  CHECK(cache::lagrange_residual(uniform, 0.5, 1.0) > 0.1);

  // Growing one-entry perturbations grow the residual monotonically.
  double previous = 0.0;
  for (double bump : {0.02, 0.05, 0.1, 0.2, 0.4}) {
    cache::ContinuousPlan plan = cache::geometric_fanout_continuous(0.5, 1.0, 2, 20.0);
    plan.fan_out[1] *= 1.0 + bump;
    const double residual = cache::lagrange_residual(plan, 0.5, 1.0);
    CHECK(residual > previous);
    previous = residual;
  }
}

TEST_CASE("conditional hit rate endpoints") {
  const std::vector<int> ones{1, 1, 1};
  CHECK(cache::conditional_hit_rate(ones, 0.5, 1.0) == 0.0);
  CHECK(cache::conditional_hit_rate(ones, 0.5, 2.5) == 0.0);

  const std::vector<int> huge{1000000, 1000000, 1000000};
  CHECK(cache::conditional_hit_rate(huge, 0.5, 1.0) > 1.0 - 1e-5);
}

TEST_CASE("conditional hit rate double evaluation") {
  // Loop route vs explicit capped-geometric weights.
  const std::vector<int> plan{8, 6, 6};
  const double a = 0.6;
  const double r = 1.0;
  const double loop = cache::conditional_hit_rate(plan, a, r);
  const double direct = (1.0 - a) * (1.0 - 1.0 / 8.0) +
                        a * (1.0 - a) * (1.0 - 1.0 / 6.0) +
                        a * a * (1.0 - 1.0 / 6.0);
  CHECK(std::abs(loop - direct) < 1e-12);
}

TEST_CASE("rounded geometric plan is near the integer optimum") {
  for (double r : {0.5, 1.0, 2.0}) {
    for (double a : {0.3, 0.6, 0.9}) {
      for (int budget = 3; budget <= 12; ++budget) {
        const cache::FanOutPlan plan =
            cache::geometric_fanout(a, r, 2, budget, Origin::Primary);
        const double mine = cache::conditional_hit_rate(plan, a, r);
        const double best = brute_force_optimum(a, r, 2, budget);
        CHECK(mine >= best - 0.02 * best - 1e-12);
      }
    }
  }
}

TEST_CASE("geometric dominates uniform at comfortable budgets") {
  for (double r : {0.5, 1.0, 2.0}) {
    for (double a : {0.3, 0.6, 0.9}) {
      for (int lookahead : {2, 3}) {
        for (int budget = 2 * (lookahead + 1); budget <= 24; budget += 3) {
          const double geometric = cache::conditional_hit_rate(
              cache::geometric_fanout(a, r, lookahead, budget, Origin::Primary), a, r);
          const double uniform = cache::conditional_hit_rate(
              cache::uniform_fanout(lookahead, budget), a, r);
          CHECK(geometric >= uniform - 1e-12);
        }
      }
    }
  }
}

TEST_CASE("synthetic power-law process matches the model hit rate") {
  // Draw accepted length from the capped geometric, then hit with the
  // power-law probability; the empirical frequency must match the formula.
  const std::vector<int> plan{8, 5, 4, 3};
  const double a = 0.7;
  const double r = 1.2;
  const double expected = cache::conditional_hit_rate(plan, a, r);
  rng::Stream rng(33);
  const int rounds = 100000;
  int hits = 0;
  for (int i = 0; i < rounds; ++i) {
    int accepted = 0;
    while (accepted < 3 && rng.next_uniform() < a) ++accepted;
    const int fan = plan[static_cast<std::size_t>(accepted)];
    const double hit_prob = 1.0 - std::pow(static_cast<double>(fan), -r);
    hits += rng.next_uniform() < hit_prob ? 1 : 0;
  }
  const double freq = static_cast<double>(hits) / rounds;
  const double sigma = std::sqrt(expected * (1.0 - expected) / rounds);
  CHECK(std::abs(freq - expected) < 3.0 * sigma);
}

TEST_CASE("build_cache with a zero plan is empty") {
  const lm::SyntheticLM model = lm::make_lm(8, 1, 0.8, 41);
  rng::Stream rng(42);
  const std::vector<int> context{5};
  const specdec::Speculation spec =
      specdec::draft(model, context, 2, SamplingScheme::standard(), rng);
  const cache::FanOutPlan plan{{0, 0, 0}, Origin::Primary, 0};
  const cache::SpeculationCache built =
      cache::build_cache(model, context, spec, plan, SamplingScheme::standard(), 2, rng);
  CHECK(built.size() == 0);
}

TEST_CASE("build_cache excludes the token sent for verification") {
  // Draft logits rank 0 > 1 > 2 > 3 and the drafted token is 0, so the
  // position-0 candidates are exactly tokens 1 and 2.
  const lm::SyntheticLM model = single_row_lm({0.6, 0.25, 0.1, 0.05}, 43);
  specdec::Speculation spec;
  spec.tokens = {0};
  spec.draft_dists = {model.conditional({})};
  const cache::FanOutPlan plan{{2, 0}, Origin::Primary, 2};
  rng::Stream rng(44);
  const cache::SpeculationCache built = cache::build_cache(
      model, {}, spec, plan, SamplingScheme::standard(), 1, rng);
  CHECK(built.size() == 2);
  CHECK(built.lookup({0, 1}) != nullptr);
  CHECK(built.lookup({0, 2}) != nullptr);
  CHECK(built.lookup({0, 0}) == nullptr);  // excluded sampled token
  CHECK(built.lookup({0, 3}) == nullptr);
}

TEST_CASE("build_cache entry count equals the plan total") {
  rng::Stream seeds(45);
  const lm::SyntheticLM model = lm::make_lm(12, 1, 0.7, 46);
  for (int trial = 0; trial < 100; ++trial) {
    const int lookahead = 1 + static_cast<int>(seeds.next_uniform() * 3);
    std::vector<int> fan(static_cast<std::size_t>(lookahead) + 1);
    int total = 0;
    for (int k = 0; k <= lookahead; ++k) {
      // Stay within the exclusion cap of vocab - 1 candidates.
      fan[static_cast<std::size_t>(k)] =
          static_cast<int>(seeds.next_uniform() * 11);
      total += fan[static_cast<std::size_t>(k)];
    }
    rng::Stream rng(seeds.next_u64());
    const std::vector<int> context{trial % 12};
    const specdec::Speculation spec = specdec::draft(
        model, context, lookahead, SamplingScheme::standard(), rng);
    const cache::FanOutPlan plan{fan, Origin::Primary, total};
    const cache::SpeculationCache built = cache::build_cache(
        model, context, spec, plan, SamplingScheme::standard(), lookahead, rng);
    CHECK(built.size() == static_cast<std::size_t>(total));
  }
}

TEST_CASE("lookup returns exactly the stored speculation") {
  const lm::SyntheticLM model = lm::make_lm(10, 1, 0.9, 47);
  rng::Stream rng(48);
  const std::vector<int> context{3};
  const specdec::Speculation spec =
      specdec::draft(model, context, 2, SamplingScheme::standard(), rng);
  const cache::FanOutPlan plan{{3, 3, 3}, Origin::Primary, 9};
  const cache::SpeculationCache built = cache::build_cache(
      model, context, spec, plan, SamplingScheme::standard(), 2, rng);
  for (const auto& [outcome, stored] : built.entries()) {
    const specdec::Speculation* found = built.lookup(outcome);
    REQUIRE(found != nullptr);
    CHECK(found->tokens == stored.tokens);
    CHECK(found->draft_dists == stored.draft_dists);
    CHECK(found->origin == Origin::Primary);
  }
  CHECK(built.lookup({7, 0}) == nullptr);
}

TEST_CASE("rejected bonus never equals the excluded token") {
  // The residual assigns zero mass to any token the draft over-weights, and
  // a rejection of that token implies exactly that.
  const lm::SyntheticLM target = lm::make_lm(8, 1, 0.5, 49);
  const lm::SyntheticLM draft_lm = lm::derive_draft(target, 0.7, 50);
  rng::Stream rng(51);
  std::vector<int> context{0};
  int rejections = 0;
  for (int i = 0; i < 20000; ++i) {
    const specdec::Speculation spec =
        specdec::draft(draft_lm, context, 3, SamplingScheme::standard(), rng);
    const specdec::RoundResult result =
        specdec::verify(target, context, spec, rng);
    if (result.outcome.accepted < 3) {
      ++rejections;
      CHECK(result.outcome.bonus !=
            spec.tokens[static_cast<std::size_t>(result.outcome.accepted)]);
    }
  }
  CHECK(rejections > 1000);
}

TEST_CASE("worked-example conditional hit rates") {
  const Categorical target{{0.48, 0.48, 0.02, 0.02}};
  const Categorical draft{{0.49, 0.49, 0.01, 0.01}};
  const Categorical reshaped{{0.47, 0.47, 0.03, 0.03}};
  const Logits ranking = log_of({0.49, 0.49, 0.01, 0.01});
  CHECK(std::abs(cache::exact_rejection_hit_rate(target, draft, ranking, 2) -
                 0.5) < 1e-12);
  CHECK(std::abs(cache::exact_rejection_hit_rate(target, reshaped, ranking, 2) -
                 1.0) < 1e-12);
}

TEST_CASE("residual fraction in the cached set is monotone in the downweight") {
  rng::Stream rng(52);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> weights(10);
    for (double& w : weights) w = -std::log(1.0 - rng.next_uniform());
    const Categorical target = dist::normalize(weights);
    Logits z;
    for (int i = 0; i < 10; ++i) z.values.push_back(4.0 * rng.next_uniform() - 2.0);
    const int fan_out = 1 + static_cast<int>(rng.next_uniform() * 8);
    double previous = -1.0;
    for (double c : {1.0, 0.8, 0.6, 0.4, 0.2, 0.0}) {
      const double fraction =
          cache::in_cache_residual_fraction(target, z, fan_out, c);
      CHECK(fraction >= previous - 1e-12);
      previous = fraction;
    }
  }
}
