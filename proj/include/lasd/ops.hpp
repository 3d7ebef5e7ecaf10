// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.hpp
 * @brief  Differentiable layer ops over Var handles (channel-first layout).
 *
 * Optional bias operands may be passed as a default-constructed Var.
 */
#pragma once

#include <lasd/autodiff.hpp>
#include <lasd/kernels.hpp>

namespace lasd {

enum class BnMode { train, infer };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization state for tensor-level use.
template <typename T> struct BatchNormState {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T eps = T(kBatchNormEps);
  T momentum = T(kBatchNormMomentum);
  BnMode mode = BnMode::infer;

  /// gamma = 1, beta = 0, running mean 0, running variance 1.
  static BatchNormState identity(std::size_t channels);
};

template <typename T>
Tensor<T> batchnorm(const Tensor<T> &x, BatchNormState<T> &state);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(const Var<T> &a, const Var<T> &b);
template <typename T> Var<T> scale(const Var<T> &a, T factor);
template <typename T> Var<T> sum(const Var<T> &a);
/// sum(a * weights) with a constant weight tensor.
template <typename T> Var<T> dot(const Var<T> &a, const Tensor<T> &weights);

template <typename T> Var<T> relu(Var<T> x);

template <typename T>
Var<T> conv2d(const Var<T> &x, const ConvSpec &spec, const Var<T> &w,
              const Var<T> &b);
template <typename T>
Var<T> conv1d_along(const Var<T> &x, std::size_t axis, const ConvSpec &spec,
                    const Var<T> &w, const Var<T> &b);
template <typename T>
Var<T> pointwise(const Var<T> &x, const Var<T> &w, const Var<T> &b);

template <typename T>
Var<T> batchnorm_train(const Var<T> &x, const Var<T> &gamma,
                       const Var<T> &beta, Tensor<T> &running_mean,
                       Tensor<T> &running_var, T eps = T(kBatchNormEps),
                       T momentum = T(kBatchNormMomentum));
template <typename T>
Var<T> batchnorm_infer(Var<T> x, const Var<T> &gamma, const Var<T> &beta,
                       const Tensor<T> &running_mean,
                       const Tensor<T> &running_var, T eps = T(kBatchNormEps));

template <typename T>
Var<T> maxpool_along(const Var<T> &x, const std::vector<std::size_t> &axes,
                     std::size_t kernel = 3, std::size_t stride = 2,
                     std::size_t pad = 1);
template <typename T>
Var<T> global_reduce(const Var<T> &x, const std::vector<std::size_t> &axes,
                     ReduceOp op);

template <typename T>
Var<T> linear(const Var<T> &x, const Var<T> &w, const Var<T> &b);

/// Same elements, new extents; element count must match.
template <typename T> Var<T> reshape(Var<T> x, const Shape &shape);
template <typename T>
Var<T> permute(const Var<T> &x, const std::vector<std::size_t> &order);
/// Concatenation along the last axis; leading extents must agree.
template <typename T> Var<T> concat_last(const Var<T> &a, const Var<T> &b);

} // namespace lasd
