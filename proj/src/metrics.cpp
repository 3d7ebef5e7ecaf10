// SPDX-License-Identifier: Apache-2.0
#include <lasd/metrics.hpp>

#include <algorithm>
#include <numeric>
#include <vector>

namespace lasd {

namespace {

void check_lengths(std::size_t scores, std::size_t labels, const char *what) {
  if (scores != labels)
    throw Error(std::string(what) + ": " + std::to_string(scores) +
                " scores but " + std::to_string(labels) + " labels");
}

} // namespace

double average_precision(std::span<const double> scores,
                         std::span<const std::uint8_t> labels) {
  check_lengths(scores.size(), labels.size(), "average_precision");
  const std::size_t positives =
    std::size_t(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  if (positives == 0)
    throw Error("average_precision: no positive labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (!labels[order[k]])
      continue;
    ++hits;
    ap += double(hits) / double(k + 1);
  }
  return ap / double(positives);
}

double f1(std::span<const double> scores, std::span<const std::uint8_t> labels,
          double threshold) {
  check_lengths(scores.size(), labels.size(), "f1");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i])
      ++tp;
    else if (pred)
      ++fp;
    else if (labels[i])
      ++fn;
  }
  if (tp == 0)
    return 0;
  const double p = double(tp) / double(tp + fp), r = double(tp) / double(tp + fn);
  return 2 * p * r / (p + r);
}

} // namespace lasd
