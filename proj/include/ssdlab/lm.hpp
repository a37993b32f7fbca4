#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ssdlab/categorical.hpp"

namespace ssdlab::lm {

/**
 * Synthetic context-conditioned language model: a dense order-m Markov table
 * mapping every length-m context to a row of logits over the vocabulary.
 * Immutable after construction and a deterministic function of its
 * generation parameters, so any conditional can be recomputed exactly.
 */
class SyntheticLM {
 public:
  SyntheticLM(int vocab_size, int order, std::uint64_t seed,
              std::vector<dist::Logits> rows);

  int vocab_size() const { return vocab_; }
  int order() const { return order_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<dist::Logits>& rows() const { return rows_; }

  /// V^m, the number of context rows.
  std::size_t context_count() const { return rows_.size(); }

  /// Row index for the last `order` tokens of `context`, lexicographic.
  std::size_t context_index(std::span<const int> context) const;

  const dist::Logits& logits_at(std::span<const int> context) const;

  /// softmax(logits / temperature) at the given context.
  dist::Categorical conditional(std::span<const int> context,
                                double temperature = 1.0) const;

  friend bool operator==(const SyntheticLM&, const SyntheticLM&) = default;

 private:
  int vocab_;
  int order_;
  std::uint64_t seed_;
  std::vector<dist::Logits> rows_;
};

/**
 * Builds a model whose context rows are independent symmetric
 * Dirichlet(concentration) draws, stored as logits. Each row uses its own
 * stream derived from (seed, row index), so tables are reproducible and
 * rows can be regenerated independently.
 */
SyntheticLM make_lm(int vocab_size, int order, double concentration,
                    std::uint64_t seed);

/**
 * Derives a draft model by mixing each target row with an independent
 * Dirichlet(1) row: draft = (1 - epsilon) * target + epsilon * noise.
 * epsilon = 0 reproduces the target exactly; epsilon = 1 is independent
 * of it. Per-context acceptance is at least 1 - epsilon.
 */
SyntheticLM derive_draft(const SyntheticLM& target, double epsilon,
                         std::uint64_t noise_seed);

/// Context-averaged (uniform over contexts) acceptance rate at temperature 1.
double mean_acceptance(const SyntheticLM& target, const SyntheticLM& draft);

/// Same, with explicit sampling schemes on each side.
double mean_acceptance(const SyntheticLM& target, const SyntheticLM& draft,
                       const dist::SamplingScheme& target_scheme,
                       const dist::SamplingScheme& draft_scheme);

/// Target model paired with a draft calibrated to a nominal acceptance rate.
struct LMPair {
  SyntheticLM target;
  SyntheticLM draft;
  double nominal_alpha = 1.0;
  double epsilon = 0.0;
};

/**
 * Bisects on the mixing weight epsilon until the context-averaged acceptance
 * rate matches alpha_goal (at most 40 steps; the noise rows are fixed by
 * `seed` throughout, which makes the objective linear in epsilon).
 * Throws UnreachableError when alpha_goal lies outside the attainable range.
 */
LMPair calibrate_pair(const SyntheticLM& target, double alpha_goal,
                      std::uint64_t seed);

/**
 * JSON serialization: {"v":int,"m":int,"seed":int,"rows":[[float,...],...]}
 * with contexts in lexicographic order.
 */
void save_json(const SyntheticLM& model, const std::filesystem::path& path);
SyntheticLM load_json(const std::filesystem::path& path);
std::string to_json_string(const SyntheticLM& model);
SyntheticLM from_json_string(const std::string& text);

}  // namespace ssdlab::lm
