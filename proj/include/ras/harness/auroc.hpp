#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ras::harness {

/// Twice the Mann-Whitney count (ties count one, wins two) and the class sizes.
struct RankCount {
  std::uint64_t twice_wins = 0;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;
};

inline RankCount rank_count(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  RankCount rc;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos : neg) += 1;
      ++j;
    }
    rc.twice_wins += 2 * pos * neg_below + pos * neg;
    neg_below += neg;
    rc.positives += pos;
    rc.negatives += neg;
    i = j;
  }
  return rc;
}

/// Area under the ROC curve: the probability a positive outscores a negative, ties counted half.
inline double auroc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  for (double s : scores) {
    if (s != s) throw std::invalid_argument("auroc: NaN score");
  }
  const RankCount rc = rank_count(scores, labels);
  if (rc.positives == 0 || rc.negatives == 0) {
    throw std::invalid_argument("auroc: both classes must be present (positives=" + std::to_string(rc.positives) +
                                ", negatives=" + std::to_string(rc.negatives) + ")");
  }
  return static_cast<double>(rc.twice_wins) / (2.0 * static_cast<double>(rc.positives) * static_cast<double>(rc.negatives));
}

}  // namespace ras::harness
