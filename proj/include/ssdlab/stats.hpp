#pragma once

#include <span>
#include <vector>

#include "ssdlab/errors.hpp"

namespace ssdlab::stats {

/// Total-variation distance between two probability vectors of equal length.
double tv_distance(std::span<const double> p, std::span<const double> q);

/// TV distance between the empirical distributions of two count vectors.
double empirical_tv(std::span<const long> a, std::span<const long> b);

std::vector<long> unigram_counts(std::span<const int> tokens, int vocab);

/// Counts of (previous, current) pairs, flattened row-major; the first token
/// has no predecessor and is skipped.
std::vector<long> bigram_counts(std::span<const int> tokens, int vocab);

struct ChiSquareResult {
  double statistic = 0.0;
  int dof = 0;
  double p_value = 1.0;
};

/**
 * Two-sample chi-square homogeneity test on parallel count vectors. Cells
 * with fewer than `min_cell_total` combined observations are pooled into a
 * single bucket (in index order) to keep the statistic well calibrated;
 * cells empty in both samples are dropped.
 */
ChiSquareResult chi_square_two_sample(std::span<const long> counts_a,
                                      std::span<const long> counts_b,
                                      long min_cell_total = 10);

}  // namespace ssdlab::stats
