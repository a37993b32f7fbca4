#include "ssdlab/categorical.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssdlab::dist {

bool is_normalized(const Categorical& p, double tol) {
  double total = 0.0;
  for (double v : p.probs) {
    if (!(v >= 0.0) || !std::isfinite(v)) return false;
    total += v;
  }
  return std::abs(total - 1.0) <= tol;
}

Categorical normalize(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw Error("normalize: weights must be finite and nonnegative");
    }
    total += w;
  }
  if (total <= 0.0) {
    throw AllZeroError("normalize: all weights are zero");
  }
  Categorical out;
  out.probs.reserve(weights.size());
  for (double w : weights) out.probs.push_back(w / total);
  return out;
}

std::vector<int> top_indices(const Logits& z, int count) {
  const int n = z.size();
  if (count < 0 || count > n) {
    throw Error("top_indices: count out of range");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return a < b;  // ties -> lowest token index
  });
  order.resize(static_cast<std::size_t>(count));
  return order;
}

Categorical softmax(const Logits& z, double temperature) {
  if (!(temperature > 0.0)) throw Error("softmax: temperature must be > 0");
  if (z.size() == 0) throw Error("softmax: empty logits");
  double max_scaled = -HUGE_VAL;
  for (double v : z.values) {
    if (!std::isfinite(v)) throw Error("softmax: logits must be finite");
    max_scaled = std::max(max_scaled, v / temperature);
  }
  std::vector<double> weights(z.values.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = std::exp(z.values[i] / temperature - max_scaled);
  }
  return normalize(weights);
}

Categorical apply_scheme(const Logits& z, const SamplingScheme& scheme) {
  if (!(scheme.temperature > 0.0)) {
    throw Error("apply_scheme: temperature must be > 0");
  }
  if (scheme.kind == SamplingScheme::Kind::Standard) {
    return softmax(z, scheme.temperature);
  }
  if (scheme.fan_out < 1 || scheme.fan_out > z.size()) {
    throw Error("apply_scheme: fan_out out of range");
  }
  if (!(scheme.downweight >= 0.0) || !(scheme.downweight <= 1.0)) {
    throw Error("apply_scheme: downweight must be in [0, 1]");
  }
  double max_scaled = -HUGE_VAL;
  for (double v : z.values) {
    if (!std::isfinite(v)) throw Error("apply_scheme: logits must be finite");
    max_scaled = std::max(max_scaled, v / scheme.temperature);
  }
  std::vector<double> weights(z.values.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] = std::exp(z.values[i] / scheme.temperature - max_scaled);
  }
  // Scaling by a positive temperature preserves the top set of z.
  for (int t : top_indices(z, scheme.fan_out)) {
    weights[static_cast<std::size_t>(t)] *= scheme.downweight;
  }
  return normalize(weights);
}

Categorical residual(const Categorical& target, const Categorical& draft) {
  if (target.size() != draft.size()) {
    throw Error("residual: length mismatch");
  }
  std::vector<double> positive(target.probs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    positive[i] = std::max(target.probs[i] - draft.probs[i], 0.0);
    total += positive[i];
  }
  if (total <= 0.0) {
    throw DegenerateResidualError(
        "residual: zero positive mass (draft equals target)");
  }
  for (double& v : positive) v /= total;
  return Categorical{std::move(positive)};
}

double acceptance_rate(const Categorical& target, const Categorical& draft) {
  if (target.size() != draft.size()) {
    throw Error("acceptance_rate: length mismatch");
  }
  double min_sum = 0.0;
  double l1 = 0.0;
  for (std::size_t i = 0; i < target.probs.size(); ++i) {
    min_sum += std::min(target.probs[i], draft.probs[i]);
    l1 += std::abs(target.probs[i] - draft.probs[i]);
  }
  const double via_l1 = 1.0 - 0.5 * l1;
  if (std::abs(min_sum - via_l1) > 1e-12) {
    throw Error("acceptance_rate: min-sum and L1 routes disagree");
  }
  return min_sum;
}

int sample(const Categorical& p, rng::Stream& rng) {
  const double u = rng.next_uniform();
  double cumulative = 0.0;
  int last_positive = -1;
  for (int i = 0; i < p.size(); ++i) {
    const double q = p[i];
    if (q > 0.0) last_positive = i;
    cumulative += q;
    if (u < cumulative) return i;
  }
  // Rounding left cumulative slightly below 1; fall back to the last
  // positive-mass token.
  if (last_positive < 0) throw AllZeroError("sample: zero-mass distribution");
  return last_positive;
}

}  // namespace ssdlab::dist
