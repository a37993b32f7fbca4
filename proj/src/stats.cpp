#include "ssdlab/stats.hpp"

#include <cmath>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>

namespace ssdlab::stats {

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error("tv_distance: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(p[i] - q[i]);
  return 0.5 * total;
}

double empirical_tv(std::span<const long> a, std::span<const long> b) {
  if (a.size() != b.size()) throw Error("empirical_tv: length mismatch");
  const double na = static_cast<double>(std::accumulate(a.begin(), a.end(), 0L));
  const double nb = static_cast<double>(std::accumulate(b.begin(), b.end(), 0L));
  if (na <= 0.0 || nb <= 0.0) throw Error("empirical_tv: empty sample");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    total += std::abs(a[i] / na - b[i] / nb);
  }
  return 0.5 * total;
}

std::vector<long> unigram_counts(std::span<const int> tokens, int vocab) {
  std::vector<long> counts(static_cast<std::size_t>(vocab), 0);
  for (int t : tokens) {
    if (t < 0 || t >= vocab) throw Error("unigram_counts: token out of range");
    ++counts[static_cast<std::size_t>(t)];
  }
  return counts;
}

std::vector<long> bigram_counts(std::span<const int> tokens, int vocab) {
  std::vector<long> counts(static_cast<std::size_t>(vocab) * vocab, 0);
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const int prev = tokens[i - 1];
    const int cur = tokens[i];
    if (prev < 0 || prev >= vocab || cur < 0 || cur >= vocab) {
      throw Error("bigram_counts: token out of range");
    }
    ++counts[static_cast<std::size_t>(prev) * vocab + cur];
  }
  return counts;
}

ChiSquareResult chi_square_two_sample(std::span<const long> counts_a,
                                      std::span<const long> counts_b,
                                      long min_cell_total) {
  if (counts_a.size() != counts_b.size()) {
    throw Error("chi_square_two_sample: length mismatch");
  }
  const double na = static_cast<double>(
      std::accumulate(counts_a.begin(), counts_a.end(), 0L));
  const double nb = static_cast<double>(
      std::accumulate(counts_b.begin(), counts_b.end(), 0L));
  if (na <= 0.0 || nb <= 0.0) throw Error("chi_square_two_sample: empty sample");

  const double ka = std::sqrt(nb / na);
  const double kb = std::sqrt(na / nb);

  double statistic = 0.0;
  int cells = 0;
  long pooled_a = 0;
  long pooled_b = 0;
  const auto add_cell = [&](long a, long b) {
    const double diff = ka * static_cast<double>(a) - kb * static_cast<double>(b);
    statistic += diff * diff / static_cast<double>(a + b);
    ++cells;
  };
  for (std::size_t i = 0; i < counts_a.size(); ++i) {
    const long total = counts_a[i] + counts_b[i];
    if (total == 0) continue;
    if (total < min_cell_total) {
      pooled_a += counts_a[i];
      pooled_b += counts_b[i];
      continue;
    }
    add_cell(counts_a[i], counts_b[i]);
  }
  if (pooled_a + pooled_b > 0) add_cell(pooled_a, pooled_b);
  if (cells < 2) throw Error("chi_square_two_sample: fewer than two usable cells");

  ChiSquareResult out;
  out.statistic = statistic;
  out.dof = cells - 1;
  const boost::math::chi_squared chi2(out.dof);
  out.p_value = boost::math::cdf(boost::math::complement(chi2, statistic));
  return out;
}

}  // namespace ssdlab::stats
