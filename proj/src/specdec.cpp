#include "ssdlab/specdec.hpp"

#include <algorithm>
#include <cmath>

namespace ssdlab::specdec {

Speculation draft(const lm::SyntheticLM& draft_lm, std::span<const int> context,
                  int lookahead, const dist::SamplingScheme& scheme,
                  rng::Stream& rng, Origin origin) {
  if (lookahead < 1) throw Error("draft: lookahead must be >= 1");
  Speculation spec;
  spec.origin = origin;
  spec.tokens.reserve(static_cast<std::size_t>(lookahead));
  spec.draft_dists.reserve(static_cast<std::size_t>(lookahead));
  std::vector<int> buffer(context.begin(), context.end());
  for (int i = 0; i < lookahead; ++i) {
    dist::Categorical p = dist::apply_scheme(draft_lm.logits_at(buffer), scheme);
    const int token = dist::sample(p, rng);
    spec.tokens.push_back(token);
    spec.draft_dists.push_back(std::move(p));
    buffer.push_back(token);
  }
  return spec;
}

RoundResult verify(const lm::SyntheticLM& target_lm, std::span<const int> context,
                   const Speculation& spec, rng::Stream& rng,
                   const VerifyOptions& options) {
  const int lookahead = spec.lookahead();
  if (lookahead < 1) throw Error("verify: empty speculation");
  if (spec.draft_dists.size() != spec.tokens.size()) {
    throw Error("verify: tokens and draft_dists length mismatch");
  }
  std::vector<int> buffer(context.begin(), context.end());
  RoundResult result;
  for (int i = 0; i < lookahead; ++i) {
    const dist::Categorical target =
        dist::apply_scheme(target_lm.logits_at(buffer), options.target_scheme);
    const dist::Categorical& draft_dist = spec.draft_dists[static_cast<std::size_t>(i)];
    const int token = spec.tokens[static_cast<std::size_t>(i)];
    const double draft_prob = draft_dist[token];
    if (!(draft_prob > 0.0)) {
      // The token was sampled from this very distribution.
      throw Error("verify: drafted token has zero draft probability");
    }
    double accept = std::min(1.0, target[token] / draft_prob);
    accept = std::min(1.0, accept * options.accept_scale);
    const double coin = rng.next_uniform();
    if (coin < accept) {
      buffer.push_back(token);
      result.emitted.push_back(token);
      continue;
    }
    // First rejection: k = i accepted, bonus from the residual here.
    result.outcome.accepted = i;
    result.outcome.bonus = dist::sample(dist::residual(target, draft_dist), rng);
    result.emitted.push_back(result.outcome.bonus);
    return result;
  }
  // All accepted: bonus from the target at the next position.
  const dist::Categorical target =
      dist::apply_scheme(target_lm.logits_at(buffer), options.target_scheme);
  result.outcome.accepted = lookahead;
  result.outcome.bonus = dist::sample(target, rng);
  result.emitted = spec.tokens;
  result.emitted.push_back(result.outcome.bonus);
  return result;
}

namespace {

void enumerate_rounds(const lm::SyntheticLM& target_lm,
                      const lm::SyntheticLM& draft_lm,
                      const dist::SamplingScheme& scheme,
                      const dist::SamplingScheme& target_scheme, int lookahead,
                      std::vector<int>& buffer, std::size_t context_len,
                      double path_prob, RoundDistribution& out) {
  const int depth = static_cast<int>(buffer.size() - context_len);
  const dist::Categorical target =
      dist::apply_scheme(target_lm.logits_at(buffer), target_scheme);
  if (depth == lookahead) {
    // All tokens accepted; bonus comes from the target directly.
    for (int t = 0; t < target.size(); ++t) {
      if (target[t] <= 0.0) continue;
      std::vector<int> emitted(buffer.begin() +
                                   static_cast<std::ptrdiff_t>(context_len),
                               buffer.end());
      emitted.push_back(t);
      out[std::move(emitted)] += path_prob * target[t];
    }
    return;
  }
  const dist::Categorical draft_dist =
      dist::apply_scheme(draft_lm.logits_at(buffer), scheme);
  // Rejection at this position. The rejected token's identity never reaches
  // the output, so its mass aggregates: sum_s p_d(s) - min(p_t(s), p_d(s)).
  double reject_mass = 0.0;
  for (int s = 0; s < draft_dist.size(); ++s) {
    reject_mass += std::max(draft_dist[s] - target[s], 0.0);
  }
  if (reject_mass > 0.0) {
    const dist::Categorical res = dist::residual(target, draft_dist);
    for (int t = 0; t < res.size(); ++t) {
      if (res[t] <= 0.0) continue;
      std::vector<int> emitted(buffer.begin() +
                                   static_cast<std::ptrdiff_t>(context_len),
                               buffer.end());
      emitted.push_back(t);
      out[std::move(emitted)] += path_prob * reject_mass * res[t];
    }
  }
  // Acceptance of token s: drafted and accepted with mass min(p_t, p_d).
  for (int s = 0; s < draft_dist.size(); ++s) {
    const double accept_mass = std::min(target[s], draft_dist[s]);
    if (accept_mass <= 0.0) continue;
    buffer.push_back(s);
    enumerate_rounds(target_lm, draft_lm, scheme, target_scheme, lookahead,
                     buffer, context_len, path_prob * accept_mass, out);
    buffer.pop_back();
  }
}

}  // namespace

RoundDistribution exact_round_distribution(
    const lm::SyntheticLM& target_lm, const lm::SyntheticLM& draft_lm,
    std::span<const int> context, int lookahead,
    const dist::SamplingScheme& scheme,
    const dist::SamplingScheme& target_scheme) {
  if (lookahead < 1) throw Error("exact_round_distribution: lookahead < 1");
  if (target_lm.vocab_size() > 32 || lookahead > 3 || target_lm.order() > 1) {
    throw TooLargeError(
        "exact_round_distribution: enumeration bound exceeded "
        "(requires vocab <= 32, lookahead <= 3, order <= 1)");
  }
  if (target_lm.vocab_size() != draft_lm.vocab_size() ||
      target_lm.order() != draft_lm.order()) {
    throw Error("exact_round_distribution: model shapes differ");
  }
  RoundDistribution out;
  std::vector<int> buffer(context.begin(), context.end());
  enumerate_rounds(target_lm, draft_lm, scheme, target_scheme, lookahead,
                   buffer, buffer.size(), 1.0, out);
  return out;
}

RoundDistribution prefix_process(const RoundDistribution& round,
                                 const lm::SyntheticLM& target_lm,
                                 std::span<const int> context, int length,
                                 const dist::SamplingScheme& target_scheme) {
  if (length < 1) throw Error("prefix_process: length must be >= 1");
  RoundDistribution out;
  for (const auto& [emitted, prob] : round) {
    if (static_cast<int>(emitted.size()) >= length) {
      std::vector<int> prefix(emitted.begin(),
                              emitted.begin() + static_cast<std::ptrdiff_t>(length));
      out[std::move(prefix)] += prob;
      continue;
    }
    // Round ended early: extend by exact target sampling, expanding every
    // continuation of the emitted sequence up to the requested length.
    std::vector<std::pair<std::vector<int>, double>> frontier{{emitted, prob}};
    while (static_cast<int>(frontier.front().first.size()) < length) {
      std::vector<std::pair<std::vector<int>, double>> next;
      for (const auto& [prefix, mass] : frontier) {
        std::vector<int> full(context.begin(), context.end());
        full.insert(full.end(), prefix.begin(), prefix.end());
        const dist::Categorical target =
            dist::apply_scheme(target_lm.logits_at(full), target_scheme);
        for (int t = 0; t < target.size(); ++t) {
          if (target[t] <= 0.0) continue;
          std::vector<int> extended = prefix;
          extended.push_back(t);
          next.emplace_back(std::move(extended), mass * target[t]);
        }
      }
      frontier = std::move(next);
    }
    for (auto& [prefix, mass] : frontier) out[std::move(prefix)] += mass;
  }
  return out;
}

double losslessness_tv(const lm::SyntheticLM& target_lm,
                       const lm::SyntheticLM& draft_lm,
                       std::span<const int> context, int lookahead,
                       const dist::SamplingScheme& scheme,
                       const dist::SamplingScheme& target_scheme) {
  const RoundDistribution round = exact_round_distribution(
      target_lm, draft_lm, context, lookahead, scheme, target_scheme);
  double worst = 0.0;
  for (int length = 1; length <= lookahead + 1; ++length) {
    const RoundDistribution emitted =
        prefix_process(round, target_lm, context, length, target_scheme);
    // Target chain rule over all length-`length` sequences.
    RoundDistribution chain;
    std::vector<std::pair<std::vector<int>, double>> frontier{{{}, 1.0}};
    for (int step = 0; step < length; ++step) {
      std::vector<std::pair<std::vector<int>, double>> next;
      for (const auto& [prefix, mass] : frontier) {
        std::vector<int> full(context.begin(), context.end());
        full.insert(full.end(), prefix.begin(), prefix.end());
        const dist::Categorical target =
            dist::apply_scheme(target_lm.logits_at(full), target_scheme);
        for (int t = 0; t < target.size(); ++t) {
          if (target[t] <= 0.0) continue;
          std::vector<int> extended = prefix;
          extended.push_back(t);
          next.emplace_back(std::move(extended), mass * target[t]);
        }
      }
      frontier = std::move(next);
    }
    for (auto& [prefix, mass] : frontier) chain[std::move(prefix)] += mass;

    double tv = 0.0;
    for (const auto& [seq, prob] : emitted) {
      const auto it = chain.find(seq);
      tv += std::abs(prob - (it == chain.end() ? 0.0 : it->second));
    }
    for (const auto& [seq, prob] : chain) {
      if (emitted.find(seq) == emitted.end()) tv += prob;
    }
    worst = std::max(worst, 0.5 * tv);
  }
  return worst;
}

double expected_tokens(double alpha, int lookahead) {
  if (lookahead < 1) throw Error("expected_tokens: lookahead must be >= 1");
  if (!(alpha >= 0.0) || !(alpha <= 1.0)) {
    throw Error("expected_tokens: alpha must be in [0, 1]");
  }
  if (alpha == 1.0) return static_cast<double>(lookahead + 1);
  return (1.0 - std::pow(alpha, lookahead + 1)) / (1.0 - alpha);
}

}  // namespace ssdlab::specdec
