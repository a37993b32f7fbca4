#include "ssdlab/cache.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssdlab::cache {

int FanOutPlan::total() const {
  return std::accumulate(fan_out.begin(), fan_out.end(), 0);
}

ContinuousPlan geometric_fanout_continuous(double acceptance, double exponent,
                                           int lookahead, double budget) {
  if (!(acceptance > 0.0) || !(acceptance < 1.0)) {
    throw Error("geometric_fanout: acceptance must be in (0, 1)");
  }
  if (!(exponent > 0.0)) throw Error("geometric_fanout: exponent must be > 0");
  if (lookahead < 1) throw Error("geometric_fanout: lookahead must be >= 1");
  if (!(budget > 0.0)) throw Error("geometric_fanout: budget must be > 0");

  const double ratio = std::pow(acceptance, 1.0 / (1.0 + exponent));
  const double cap_factor =
      std::pow(acceptance, lookahead / (1.0 + exponent)) *
      std::pow(1.0 - acceptance, -1.0 / (1.0 + exponent));
  // Geometric series sum for positions 0..K-1 plus the capped last position.
  const double series = (1.0 - std::pow(ratio, lookahead)) / (1.0 - ratio);
  const double first = budget / (cap_factor + series);

  ContinuousPlan plan;
  plan.fan_out.resize(static_cast<std::size_t>(lookahead) + 1);
  for (int k = 0; k < lookahead; ++k) {
    plan.fan_out[static_cast<std::size_t>(k)] = first * std::pow(ratio, k);
  }
  plan.fan_out[static_cast<std::size_t>(lookahead)] = first * cap_factor;
  return plan;
}

FanOutPlan geometric_fanout(double acceptance, double exponent, int lookahead,
                            int budget, specdec::Origin role) {
  if (budget < lookahead + 1) {
    throw BudgetTooSmallError(
        "geometric_fanout: budget must be at least lookahead + 1");
  }
  const ContinuousPlan continuous =
      geometric_fanout_continuous(acceptance, exponent, lookahead, budget);
  const std::size_t positions = continuous.fan_out.size();

  std::vector<int> rounded(positions);
  std::vector<double> remainder(positions);
  int assigned = 0;
  for (std::size_t k = 0; k < positions; ++k) {
    rounded[k] = static_cast<int>(std::floor(continuous.fan_out[k]));
    remainder[k] = continuous.fan_out[k] - rounded[k];
    assigned += rounded[k];
  }
  // Largest fractional remainder takes the leftover budget; ties go to the
  // lower position.
  std::vector<std::size_t> order(positions);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
    return a < b;
  });
  for (std::size_t i = 0; assigned < budget; ++i) {
    rounded[order[i % positions]] += 1;
    ++assigned;
  }
  // At least one outcome per position: steal from the largest entry.
  for (std::size_t k = 0; k < positions; ++k) {
    while (rounded[k] < 1) {
      const auto donor = static_cast<std::size_t>(std::distance(
          rounded.begin(), std::max_element(rounded.begin(), rounded.end())));
      if (rounded[donor] <= 1) {
        throw BudgetTooSmallError("geometric_fanout: cannot satisfy minimum");
      }
      rounded[donor] -= 1;
      rounded[k] += 1;
    }
  }
  // Polish with single-unit transfers under the model objective. Rounding
  // alone can land below the uniform plan at tight budgets; the objective is
  // separable and concave, so exchange-local optima are global.
  bool improved = true;
  while (improved) {
    improved = false;
    double best = conditional_hit_rate(rounded, acceptance, exponent);
    std::size_t best_from = 0;
    std::size_t best_to = 0;
    for (std::size_t from = 0; from < positions; ++from) {
      if (rounded[from] <= 1) continue;
      for (std::size_t to = 0; to < positions; ++to) {
        if (to == from) continue;
        rounded[from] -= 1;
        rounded[to] += 1;
        const double value = conditional_hit_rate(rounded, acceptance, exponent);
        rounded[from] += 1;
        rounded[to] -= 1;
        if (value > best + 1e-15) {
          best = value;
          best_from = from;
          best_to = to;
          improved = true;
        }
      }
    }
    if (improved) {
      rounded[best_from] -= 1;
      rounded[best_to] += 1;
    }
  }
  return FanOutPlan{std::move(rounded), role, budget};
}

FanOutPlan uniform_fanout(int lookahead, int budget, specdec::Origin role) {
  if (lookahead < 1) throw Error("uniform_fanout: lookahead must be >= 1");
  if (budget < lookahead + 1) {
    throw BudgetTooSmallError(
        "uniform_fanout: budget must be at least lookahead + 1");
  }
  const int positions = lookahead + 1;
  std::vector<int> fan(static_cast<std::size_t>(positions), budget / positions);
  for (int k = 0; k < budget % positions; ++k) {
    fan[static_cast<std::size_t>(k)] += 1;
  }
  return FanOutPlan{std::move(fan), role, budget};
}

double lagrange_residual(const ContinuousPlan& plan, double acceptance,
                         double exponent) {
  const int lookahead = static_cast<int>(plan.fan_out.size()) - 1;
  if (lookahead < 1) throw Error("lagrange_residual: need at least 2 positions");
  for (double f : plan.fan_out) {
    if (!(f > 0.0)) throw Error("lagrange_residual: entries must be positive");
  }
  const auto marginal_gain = [&](double f) {
    return exponent * std::pow(f, -exponent - 1.0);
  };
  const double base = marginal_gain(plan.fan_out[0]);
  double worst = 0.0;
  for (int k = 1; k <= lookahead; ++k) {
    const double lhs = marginal_gain(plan.fan_out[static_cast<std::size_t>(k)]);
    double rhs = std::pow(acceptance, -k) * base;
    if (k == lookahead) rhs *= (1.0 - acceptance);
    worst = std::max(worst, std::abs(lhs - rhs) / std::abs(rhs));
  }
  return worst;
}

double conditional_hit_rate(std::span<const int> fan_out, double acceptance,
                            double exponent) {
  const int lookahead = static_cast<int>(fan_out.size()) - 1;
  if (lookahead < 0) throw Error("conditional_hit_rate: empty plan");
  if (!(acceptance >= 0.0) || !(acceptance <= 1.0)) {
    throw Error("conditional_hit_rate: acceptance must be in [0, 1]");
  }
  const auto position_hit = [&](int f) {
    return f >= 1 ? 1.0 - std::pow(static_cast<double>(f), -exponent) : 0.0;
  };
  double rate = 0.0;
  double weight = 1.0;  // a^k
  for (int k = 0; k < lookahead; ++k) {
    rate += weight * (1.0 - acceptance) *
            position_hit(fan_out[static_cast<std::size_t>(k)]);
    weight *= acceptance;
  }
  rate += weight * position_hit(fan_out[static_cast<std::size_t>(lookahead)]);
  return rate;
}

double conditional_hit_rate(const FanOutPlan& plan, double acceptance,
                            double exponent) {
  return conditional_hit_rate(std::span<const int>(plan.fan_out), acceptance,
                              exponent);
}

double in_cache_residual_fraction(const dist::Categorical& target,
                                  const dist::Logits& draft_logits, int fan_out,
                                  double downweight, double temperature) {
  if (target.size() != draft_logits.size()) {
    throw Error("in_cache_residual_fraction: length mismatch");
  }
  const dist::Categorical draft = dist::apply_scheme(
      draft_logits, dist::SamplingScheme::saguaro(fan_out, downweight, temperature));
  std::vector<bool> in_top(static_cast<std::size_t>(target.size()), false);
  for (int t : dist::top_indices(draft_logits, fan_out)) {
    in_top[static_cast<std::size_t>(t)] = true;
  }
  double inside = 0.0;
  double outside = 0.0;
  for (int t = 0; t < target.size(); ++t) {
    const double mass = std::max(target[t] - draft[t], 0.0);
    (in_top[static_cast<std::size_t>(t)] ? inside : outside) += mass;
  }
  const double total = inside + outside;
  if (total <= 0.0) return 1.0;  // zero residual mass: a rejection never happens
  return inside / total;
}

double exact_rejection_hit_rate(const dist::Categorical& target,
                                const dist::Categorical& draft,
                                const dist::Logits& ranking_logits,
                                int fan_out) {
  if (target.size() != draft.size() || target.size() != ranking_logits.size()) {
    throw Error("exact_rejection_hit_rate: length mismatch");
  }
  const dist::Categorical res = dist::residual(target, draft);
  const std::vector<int> ranked =
      dist::top_indices(ranking_logits, ranking_logits.size());
  double hit_mass = 0.0;
  double reject_mass = 0.0;
  for (int s = 0; s < draft.size(); ++s) {
    const double reject_s = std::max(draft[s] - target[s], 0.0);
    if (reject_s <= 0.0) continue;
    reject_mass += reject_s;
    int taken = 0;
    double covered = 0.0;
    for (int t : ranked) {
      if (t == s) continue;  // the rejected token cannot be the bonus
      covered += res[t];
      if (++taken == fan_out) break;
    }
    hit_mass += reject_s * covered;
  }
  if (reject_mass <= 0.0) {
    throw DegenerateResidualError(
        "exact_rejection_hit_rate: rejection is impossible for this pair");
  }
  return hit_mass / reject_mass;
}

SpeculationCache build_cache(const lm::SyntheticLM& draft_lm,
                             std::span<const int> context,
                             const specdec::Speculation& spec_under_verification,
                             const FanOutPlan& plan,
                             const dist::SamplingScheme& scheme,
                             int next_lookahead, rng::Stream& rng) {
  const int lookahead = spec_under_verification.lookahead();
  if (plan.lookahead() != lookahead) {
    throw Error("build_cache: plan length does not match speculation");
  }
  if (plan.role != spec_under_verification.origin) {
    throw Error("build_cache: plan role does not match speculation origin");
  }
  const std::uint64_t base = rng.next_u64();
  SpeculationCache::Map entries;
  std::vector<int> prefix(context.begin(), context.end());
  std::uint64_t ordinal = 0;
  for (int k = 0; k <= lookahead; ++k) {
    const int wanted = plan.fan_out[static_cast<std::size_t>(k)];
    if (wanted > 0) {
      const dist::Logits& logits = draft_lm.logits_at(prefix);
      const std::vector<int> ranked = dist::top_indices(logits, logits.size());
      const int excluded =
          k < lookahead ? spec_under_verification.tokens[static_cast<std::size_t>(k)]
                        : -1;
      int taken = 0;
      for (int candidate : ranked) {
        if (candidate == excluded) continue;
        if (taken == wanted) break;
        ++taken;
        std::vector<int> continuation = prefix;
        continuation.push_back(candidate);
        rng::Stream entry_rng(rng::derive_seed(base, ordinal++));
        entries.emplace(
            specdec::VerificationOutcome{k, candidate},
            specdec::draft(draft_lm, continuation, next_lookahead, scheme,
                           entry_rng, specdec::Origin::Primary));
      }
    }
    if (k < lookahead) {
      prefix.push_back(
          spec_under_verification.tokens[static_cast<std::size_t>(k)]);
    }
  }
  return SpeculationCache(std::move(entries), spec_under_verification.origin);
}

}  // namespace ssdlab::cache
