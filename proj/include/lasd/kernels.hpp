// SPDX-License-Identifier: Apache-2.0
/**
 * @file   kernels.hpp
 * @brief  Forward and backward compute kernels for the model's layer set.
 *
 * All tensors are channel-first: axis 0 is the channel axis. Convolution
 * kernels lower to GEMM (im2col, or shifted strided GEMMs for unit-stride 1D
 * convolution over a long inner extent); elementwise, normalization and
 * pooling loops are OpenMP-parallel. Backward kernels accumulate (+=) into
 * pre-sized gradient tensors.
 *
 * A serial nested-loop version of each convolution and pooling kernel lives
 * in reference.hpp and is what the tests compare against.
 */
#pragma once

#include <lasd/tensor.hpp>

#include <cstdint>
#include <vector>

namespace lasd {

/// floor((in + 2*pad - kernel) / stride) + 1; throws ShapeError if < 1.
std::size_t window_output_extent(std::size_t in, std::size_t kernel,
                                 std::size_t stride, std::size_t pad);

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<std::size_t> kernel;
  std::vector<std::size_t> stride;
  std::vector<std::size_t> padding;

  std::size_t dims() const { return kernel.size(); }
  std::size_t output_extent(std::size_t dim, std::size_t in) const;

  /// `dims`-D convolution with a cubic kernel and (k-1)/2 zero padding.
  static ConvSpec same(std::size_t in_channels, std::size_t out_channels,
                       std::size_t kernel, std::size_t dims,
                       std::size_t stride = 1);
};

enum class ReduceOp { max, mean };

/// Flat indices of the winning input element per pooled output element.
using ArgIndex = std::vector<std::uint32_t>;

namespace kernels {

// 2D cross-correlation over the last two axes. x: [Ci, batch..., H, W],
// w: [Co, Ci, kh, kw], b: [Co] or empty. Output [Co, batch..., H', W'].
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T> &x, const Tensor<T> &w,
                         const Tensor<T> &b, const ConvSpec &spec);
template <typename T>
void conv2d_backward(const Tensor<T> &x, const Tensor<T> &w,
                     const Tensor<T> &dy, const ConvSpec &spec, Tensor<T> *dx,
                     Tensor<T> *dw, Tensor<T> *db);

// 1D cross-correlation along `axis` (1 <= axis < rank). w: [Co, Ci, k].
template <typename T>
Tensor<T> conv1d_forward(const Tensor<T> &x, std::size_t axis,
                         const Tensor<T> &w, const Tensor<T> &b,
                         const ConvSpec &spec);
template <typename T>
void conv1d_backward(const Tensor<T> &x, std::size_t axis, const Tensor<T> &w,
                     const Tensor<T> &dy, const ConvSpec &spec, Tensor<T> *dx,
                     Tensor<T> *dw, Tensor<T> *db);

// Channel mixing (1x1 convolution). x: [Ci, rest...], w: [Co, Ci].
template <typename T>
Tensor<T> pointwise_forward(const Tensor<T> &x, const Tensor<T> &w,
                            const Tensor<T> &b);
template <typename T>
void pointwise_backward(const Tensor<T> &x, const Tensor<T> &w,
                        const Tensor<T> &dy, Tensor<T> *dx, Tensor<T> *dw,
                        Tensor<T> *db);

template <typename T> struct BatchStats {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

// Batch statistics over every non-channel axis; updates running stats.
template <typename T>
Tensor<T> batchnorm_train_forward(const Tensor<T> &x, const Tensor<T> &gamma,
                                  const Tensor<T> &beta, T eps, T momentum,
                                  Tensor<T> &running_mean,
                                  Tensor<T> &running_var, BatchStats<T> &saved);
template <typename T>
void batchnorm_train_backward(const Tensor<T> &x, const Tensor<T> &gamma,
                              const Tensor<T> &dy, const BatchStats<T> &saved,
                              Tensor<T> *dx, Tensor<T> *dgamma,
                              Tensor<T> *dbeta);
template <typename T>
Tensor<T> batchnorm_infer_forward(Tensor<T> x, const Tensor<T> &gamma,
                                  const Tensor<T> &beta,
                                  const Tensor<T> &running_mean,
                                  const Tensor<T> &running_var, T eps);
template <typename T>
void batchnorm_infer_backward(const Tensor<T> &x, const Tensor<T> &gamma,
                              const Tensor<T> &running_mean,
                              const Tensor<T> &running_var, T eps,
                              const Tensor<T> &dy, Tensor<T> *dx,
                              Tensor<T> *dgamma, Tensor<T> *dbeta);

template <typename T> void relu_inplace(Tensor<T> &x);
template <typename T>
void relu_backward(const Tensor<T> &y, const Tensor<T> &dy, Tensor<T> &dx);

// Max pooling over one or two axes with -inf padding. Among equal maxima the
// argmax is the one with the lowest index on the last pooled axis, then on
// the first.
template <typename T>
Tensor<T> maxpool_forward(const Tensor<T> &x, const std::vector<std::size_t> &axes,
                          std::size_t kernel, std::size_t stride,
                          std::size_t pad, ArgIndex &argmax);
template <typename T>
void maxpool_backward(const Tensor<T> &dy, const ArgIndex &argmax,
                      Tensor<T> &dx);

// Removes `axes`; the result keeps the remaining axes in order.
template <typename T>
Tensor<T> global_reduce_forward(const Tensor<T> &x,
                                const std::vector<std::size_t> &axes,
                                ReduceOp op, ArgIndex &argmax);
template <typename T>
void global_reduce_backward(const Shape &x_shape,
                            const std::vector<std::size_t> &axes, ReduceOp op,
                            const Tensor<T> &dy, const ArgIndex &argmax,
                            Tensor<T> &dx);

// Affine map over the last axis. x: [..., Din], w: [Dout, Din], b: [Dout].
template <typename T>
Tensor<T> linear_forward(const Tensor<T> &x, const Tensor<T> &w,
                         const Tensor<T> &b);
template <typename T>
void linear_backward(const Tensor<T> &x, const Tensor<T> &w,
                     const Tensor<T> &dy, Tensor<T> *dx, Tensor<T> *dw,
                     Tensor<T> *db);

template <typename T>
Tensor<T> permute(const Tensor<T> &x, const std::vector<std::size_t> &order);

/// Checks and normalizes an axis list: sorted, unique, each < rank.
std::vector<std::size_t> normalize_axes(std::vector<std::size_t> axes,
                                        std::size_t rank);

} // namespace kernels
} // namespace lasd
