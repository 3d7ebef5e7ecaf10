// SPDX-License-Identifier: Apache-2.0
/**
 * @file   metrics.hpp
 * @brief  Frame-level average precision and F1.
 *
 * AP is the non-interpolated precision-recall staircase over a single pool
 * of frames; no per-video grouping is applied.
 */
#pragma once

#include <lasd/tensor.hpp>

#include <cstdint>
#include <span>

namespace lasd {

/// Sum over recall steps of (R_k - R_{k-1}) * P_k after a descending sort
/// on score, ties broken by original index. Throws Error on length mismatch
/// or when no label is positive.
double average_precision(std::span<const double> scores,
                         std::span<const std::uint8_t> labels);

/// 2PR / (P + R) with predictions score >= threshold; 0 when P + R = 0.
double f1(std::span<const double> scores, std::span<const std::uint8_t> labels,
          double threshold = 0.5);

} // namespace lasd
