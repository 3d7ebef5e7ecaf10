// SPDX-License-Identifier: Apache-2.0
/**
 * @file   loss.hpp
 * @brief  Temperature softmax, per-frame cross-entropy and the combined
 *         main + visual-auxiliary objective.
 *
 * Logits are [..., 2] as (r_speaking, r_no_speaking). With d = (r_s - r_ns)/tau
 * the speaking probability is sigmoid(d), which is the two-way softmax
 * written without overflow for any logit magnitude.
 */
#pragma once

#include <lasd/autodiff.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace lasd {

using Labels = std::vector<std::uint8_t>;

inline constexpr double kProbabilityClamp = 1e-7;
inline constexpr double kAuxLossWeight = 0.5;

struct TemperatureSchedule {
  double tau0 = 1.3;
  double alpha = 0.02;

  /// tau0 - alpha * e; throws Error for e < 0 or a non-positive result.
  double at(int epoch) const;
};

/// tau at `epoch` under the default schedule.
double temperature(int epoch);

/// p_speaking per frame; throws Error unless tau > 0.
template <typename T>
std::vector<double> softmax_temp(const Tensor<T> &logits, double tau);

/// Mean binary cross-entropy, probabilities clamped to [1e-7, 1 - 1e-7].
double sequence_loss(std::span<const double> p, std::span<const std::uint8_t> g);

struct LossBreakdown {
  double loss_av = 0;
  double loss_v = 0;
  double lambda = kAuxLossWeight;
  double loss_asd = 0;
};

/// loss_asd = loss_av + lambda * loss_v.
template <typename T>
LossBreakdown combined_loss(const Tensor<T> &main_logits,
                            const Tensor<T> &visual_logits, const Labels &g,
                            double tau, double lambda = kAuxLossWeight);

/// Differentiable softmax_temp followed by sequence_loss over every frame of
/// a [..., 2] logit tensor; returns a scalar.
template <typename T>
Var<T> temperature_bce(const Var<T> &logits, const Labels &g, double tau);

} // namespace lasd
