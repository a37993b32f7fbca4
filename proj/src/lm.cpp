#include "ssdlab/lm.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

namespace ssdlab::lm {

namespace {

std::size_t pow_size(int base, int exponent) {
  std::size_t out = 1;
  for (int i = 0; i < exponent; ++i) out *= static_cast<std::size_t>(base);
  return out;
}

// Logits of a normalized weight vector, with a floor to keep them finite.
dist::Logits weights_to_logits(const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  dist::Logits row;
  row.values.reserve(weights.size());
  for (double w : weights) {
    row.values.push_back(std::log(std::max(w / total, 1e-300)));
  }
  return row;
}

std::vector<double> dirichlet_row(int vocab, double concentration,
                                  rng::Stream& stream) {
  std::vector<double> weights(static_cast<std::size_t>(vocab));
  if (concentration == 1.0) {
    // Dirichlet(1) is normalized exponentials; one uniform per entry.
    for (double& w : weights) {
      w = -std::log(1.0 - stream.next_uniform());
    }
  } else {
    std::gamma_distribution<double> gamma(concentration, 1.0);
    for (double& w : weights) w = gamma(stream.engine());
  }
  for (double& w : weights) w = std::max(w, 1e-300);
  return weights;
}

}  // namespace

SyntheticLM::SyntheticLM(int vocab_size, int order, std::uint64_t seed,
                         std::vector<dist::Logits> rows)
    : vocab_(vocab_size), order_(order), seed_(seed), rows_(std::move(rows)) {
  if (vocab_ < 2) throw Error("SyntheticLM: vocab_size must be >= 2");
  if (order_ < 0 || order_ > 2) throw Error("SyntheticLM: order must be 0..2");
  if (rows_.size() != pow_size(vocab_, order_)) {
    throw Error("SyntheticLM: table must cover all V^m contexts");
  }
  for (const auto& row : rows_) {
    if (row.size() != vocab_) throw Error("SyntheticLM: row length mismatch");
    for (double v : row.values) {
      if (!std::isfinite(v)) throw Error("SyntheticLM: logits must be finite");
    }
  }
}

std::size_t SyntheticLM::context_index(std::span<const int> context) const {
  if (static_cast<int>(context.size()) < order_) {
    throw Error("context_index: context shorter than model order");
  }
  std::size_t index = 0;
  for (int i = 0; i < order_; ++i) {
    const int token = context[context.size() - static_cast<std::size_t>(order_) +
                              static_cast<std::size_t>(i)];
    if (token < 0 || token >= vocab_) {
      throw Error("context_index: token out of range");
    }
    index = index * static_cast<std::size_t>(vocab_) +
            static_cast<std::size_t>(token);
  }
  return index;
}

const dist::Logits& SyntheticLM::logits_at(std::span<const int> context) const {
  return rows_[context_index(context)];
}

dist::Categorical SyntheticLM::conditional(std::span<const int> context,
                                           double temperature) const {
  return dist::softmax(logits_at(context), temperature);
}

SyntheticLM make_lm(int vocab_size, int order, double concentration,
                    std::uint64_t seed) {
  if (vocab_size < 2) throw Error("make_lm: vocab_size must be >= 2");
  if (!(concentration > 0.0)) {
    throw Error("make_lm: concentration must be > 0");
  }
  const std::size_t contexts = pow_size(vocab_size, order);
  std::vector<dist::Logits> rows;
  rows.reserve(contexts);
  for (std::size_t c = 0; c < contexts; ++c) {
    rng::Stream stream(rng::derive_seed(seed, c));
    rows.push_back(weights_to_logits(dirichlet_row(vocab_size, concentration, stream)));
  }
  return SyntheticLM(vocab_size, order, seed, std::move(rows));
}

SyntheticLM derive_draft(const SyntheticLM& target, double epsilon,
                         std::uint64_t noise_seed) {
  if (!(epsilon >= 0.0) || !(epsilon <= 1.0)) {
    throw Error("derive_draft: epsilon must be in [0, 1]");
  }
  std::vector<dist::Logits> rows;
  rows.reserve(target.context_count());
  for (std::size_t c = 0; c < target.context_count(); ++c) {
    const dist::Categorical base = dist::softmax(target.rows()[c]);
    rng::Stream stream(rng::derive_seed(noise_seed, c));
    const dist::Categorical noise =
        dist::normalize(dirichlet_row(target.vocab_size(), 1.0, stream));
    std::vector<double> mixed(base.probs.size());
    for (std::size_t i = 0; i < mixed.size(); ++i) {
      mixed[i] = (1.0 - epsilon) * base.probs[i] + epsilon * noise.probs[i];
    }
    rows.push_back(weights_to_logits(mixed));
  }
  return SyntheticLM(target.vocab_size(), target.order(), noise_seed,
                     std::move(rows));
}

double mean_acceptance(const SyntheticLM& target, const SyntheticLM& draft) {
  return mean_acceptance(target, draft, dist::SamplingScheme::standard(),
                         dist::SamplingScheme::standard());
}

double mean_acceptance(const SyntheticLM& target, const SyntheticLM& draft,
                       const dist::SamplingScheme& target_scheme,
                       const dist::SamplingScheme& draft_scheme) {
  if (target.vocab_size() != draft.vocab_size() ||
      target.order() != draft.order()) {
    throw Error("mean_acceptance: model shapes differ");
  }
  double total = 0.0;
  for (std::size_t c = 0; c < target.context_count(); ++c) {
    total += dist::acceptance_rate(
        dist::apply_scheme(target.rows()[c], target_scheme),
        dist::apply_scheme(draft.rows()[c], draft_scheme));
  }
  return total / static_cast<double>(target.context_count());
}

LMPair calibrate_pair(const SyntheticLM& target, double alpha_goal,
                      std::uint64_t seed) {
  if (!(alpha_goal > 0.0) || !(alpha_goal < 1.0)) {
    throw Error("calibrate_pair: alpha_goal must be in (0, 1)");
  }
  const double floor_alpha = mean_acceptance(target, derive_draft(target, 1.0, seed));
  if (alpha_goal < floor_alpha) {
    throw UnreachableError("calibrate_pair: alpha_goal below attainable range");
  }
  double lo = 0.0;  // alpha(0) = 1
  double hi = 1.0;  // alpha(1) = floor_alpha
  for (int step = 0; step < 40; ++step) {
    const double mid = 0.5 * (lo + hi);
    const double alpha = mean_acceptance(target, derive_draft(target, mid, seed));
    if (alpha > alpha_goal) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double epsilon = 0.5 * (lo + hi);
  return LMPair{target, derive_draft(target, epsilon, seed), alpha_goal, epsilon};
}

std::string to_json_string(const SyntheticLM& model) {
  nlohmann::json doc;
  doc["v"] = model.vocab_size();
  doc["m"] = model.order();
  doc["seed"] = model.seed();
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : model.rows()) rows.push_back(row.values);
  doc["rows"] = std::move(rows);
  return doc.dump();
}

SyntheticLM from_json_string(const std::string& text) {
  const nlohmann::json doc = nlohmann::json::parse(text);
  for (const auto& key : {"v", "m", "seed", "rows"}) {
    if (!doc.contains(key)) {
      throw Error(std::string("load_json: missing key ") + key);
    }
  }
  const int vocab = doc.at("v").get<int>();
  const int order = doc.at("m").get<int>();
  const auto seed = doc.at("seed").get<std::uint64_t>();
  std::vector<dist::Logits> rows;
  for (const auto& row : doc.at("rows")) {
    rows.push_back(dist::Logits{row.get<std::vector<double>>()});
  }
  return SyntheticLM(vocab, order, seed, std::move(rows));
}

void save_json(const SyntheticLM& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("save_json: cannot open " + path.string());
  out << to_json_string(model) << "\n";
}

SyntheticLM load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_json: cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json_string(text);
}

}  // namespace ssdlab::lm
