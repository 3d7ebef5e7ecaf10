// SPDX-License-Identifier: Apache-2.0
/**
 * @file   gru.hpp
 * @brief  Gated recurrent unit with a hand-written backward pass through time.
 *
 * Gate rows are stored in r, z, n order:
 *   r = sigmoid(W_r x + b_r + U_r h + c_r)
 *   z = sigmoid(W_z x + b_z + U_z h + c_z)
 *   n = tanh(W_n x + b_n + r * (U_n h + c_n))
 *   h' = (1 - z) * n + z * h
 */
#pragma once

#include <lasd/autodiff.hpp>

namespace lasd {

/// One direction. weight_ih: [3H, D], weight_hh: [3H, H], biases: [3H].
template <typename T> struct GruWeights {
  Tensor<T> weight_ih, weight_hh, bias_ih, bias_hh;

  std::size_t hidden() const { return weight_hh.shape().at(1); }
};

/// Single step on [D] or [B, D] input with a matching [H] or [B, H] state.
template <typename T>
Tensor<T> gru_cell(const Tensor<T> &x, const Tensor<T> &h_prev,
                   const GruWeights<T> &w);

/// Runs the cell over x: [B, T, D] and returns every state, [B, T, H].
/// With `reverse` the scan goes from the last frame to the first and output
/// row t still holds the state produced at frame t. The initial state is h0
/// ([B, H]) or zero when h0 is undefined.
template <typename T>
Var<T> gru_sequence(const Var<T> &x, const Var<T> &weight_ih,
                    const Var<T> &weight_hh, const Var<T> &bias_ih,
                    const Var<T> &bias_hh, bool reverse = false,
                    const Var<T> &h0 = {});

/// Differentiable single step: x [B, D], h_prev [B, H] -> [B, H].
template <typename T>
Var<T> gru_cell(const Var<T> &x, const Var<T> &h_prev, const Var<T> &weight_ih,
                const Var<T> &weight_hh, const Var<T> &bias_ih,
                const Var<T> &bias_hh);

} // namespace lasd
