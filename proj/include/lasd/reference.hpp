// SPDX-License-Identifier: Apache-2.0
/**
 * @file   reference.hpp
 * @brief  Serial nested-loop kernels. Slow on purpose: these are the
 *         oracles the GEMM/OpenMP kernels are checked and benchmarked against.
 */
#pragma once

#include <lasd/kernels.hpp>
#include <lasd/tensor.hpp>

#include <limits>

namespace lasd::reference {

template <typename T>
Tensor<T> conv2d(const Tensor<T> &x, const Tensor<T> &w, const Tensor<T> &b,
                 const ConvSpec &spec) {
  const std::size_t r = x.rank();
  const std::size_t ci = spec.in_channels, co = spec.out_channels;
  const std::size_t h = x.extent(r - 2), wd = x.extent(r - 1);
  const std::size_t frames = x.size() / (ci * h * wd);
  const std::size_t kh = spec.kernel[0], kw = spec.kernel[1];
  const std::size_t ho = spec.output_extent(0, h), wo = spec.output_extent(1, wd);
  Shape out_shape = x.shape();
  out_shape[0] = co;
  out_shape[r - 2] = ho;
  out_shape[r - 1] = wo;
  Tensor<T> y(out_shape);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = b.empty() ? 0.0 : double(b[o]);
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = long(oy * spec.stride[0] + ky) - long(spec.padding[0]);
                const long ix = long(ox * spec.stride[1] + kx) - long(spec.padding[1]);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd))
                  continue;
                acc += double(x[((c * frames + f) * h + iy) * wd + ix]) *
                       double(w[((o * ci + c) * kh + ky) * kw + kx]);
              }
          y[((o * frames + f) * ho + oy) * wo + ox] = T(acc);
        }
  return y;
}

template <typename T>
Tensor<T> conv1d(const Tensor<T> &x, std::size_t axis, const Tensor<T> &w,
                 const Tensor<T> &b, const ConvSpec &spec) {
  const std::size_t ci = spec.in_channels, co = spec.out_channels;
  const std::size_t len = x.extent(axis), inner = inner_size(x.shape(), axis);
  const std::size_t outer = x.size() / (ci * len * inner);
  const std::size_t k = spec.kernel[0];
  const std::size_t lo = spec.output_extent(0, len);
  Shape out_shape = x.shape();
  out_shape[0] = co;
  out_shape[axis] = lo;
  Tensor<T> y(out_shape);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t s = 0; s < outer; ++s)
      for (std::size_t l = 0; l < lo; ++l)
        for (std::size_t i = 0; i < inner; ++i) {
          double acc = b.empty() ? 0.0 : double(b[o]);
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t j = 0; j < k; ++j) {
              const long il = long(l * spec.stride[0] + j) - long(spec.padding[0]);
              if (il < 0 || il >= long(len))
                continue;
              acc += double(x[((c * outer + s) * len + il) * inner + i]) *
                     double(w[(o * ci + c) * k + j]);
            }
          y[((o * outer + s) * lo + l) * inner + i] = T(acc);
        }
  return y;
}

/// Max over a window along a single axis, -inf padding.
template <typename T>
Tensor<T> maxpool1d(const Tensor<T> &x, std::size_t axis, std::size_t kernel,
                    std::size_t stride, std::size_t pad) {
  const std::size_t len = x.extent(axis), inner = inner_size(x.shape(), axis);
  const std::size_t outer = outer_size(x.shape(), axis);
  const std::size_t lo = window_output_extent(len, kernel, stride, pad);
  Shape out_shape = x.shape();
  out_shape[axis] = lo;
  Tensor<T> y(out_shape);
  for (std::size_t s = 0; s < outer; ++s)
    for (std::size_t l = 0; l < lo; ++l)
      for (std::size_t i = 0; i < inner; ++i) {
        T best = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < kernel; ++j) {
          const long il = long(l * stride + j) - long(pad);
          if (il >= 0 && il < long(len))
            best = std::max(best, x[(s * len + il) * inner + i]);
        }
        y[(s * lo + l) * inner + i] = best;
      }
  return y;
}

} // namespace lasd::reference
