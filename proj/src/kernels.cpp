// SPDX-License-Identifier: Apache-2.0
#include <lasd/kernels.hpp>

#include "blas.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace lasd {

using detail::gemm;
using detail::Trans;

std::size_t window_output_extent(std::size_t in, std::size_t kernel,
                                 std::size_t stride, std::size_t pad) {
  if (kernel == 0 || stride == 0)
    throw ShapeError("kernel and stride must be positive");
  const auto padded = static_cast<long long>(in + 2 * pad);
  const auto span = padded - static_cast<long long>(kernel);
  if (span < 0)
    throw ShapeError("window of " + std::to_string(kernel) +
                     " does not fit extent " + std::to_string(in) +
                     " with padding " + std::to_string(pad));
  return static_cast<std::size_t>(span) / stride + 1;
}

std::size_t ConvSpec::output_extent(std::size_t dim, std::size_t in) const {
  return window_output_extent(in, kernel.at(dim), stride.at(dim),
                              padding.at(dim));
}

ConvSpec ConvSpec::same(std::size_t in_channels, std::size_t out_channels,
                        std::size_t kernel, std::size_t dims,
                        std::size_t stride) {
  ConvSpec s;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.kernel.assign(dims, kernel);
  s.stride.assign(dims, stride);
  s.padding.assign(dims, (kernel - 1) / 2);
  return s;
}

namespace kernels {
namespace {

// Upper bound on im2col buffer elements per chunk.
constexpr std::size_t kColBudget = std::size_t{1} << 20;

void require(bool ok, const std::string &msg) {
  if (!ok)
    throw ShapeError(msg);
}

template <typename T>
void check_bias(const Tensor<T> &b, std::size_t co, const char *op) {
  require(b.empty() || (b.rank() == 1 && b.extent(0) == co),
          std::string(op) + ": bias must have shape [" + std::to_string(co) +
            "], got " + to_string(b.shape()));
}

template <typename T>
void add_channel_bias(Tensor<T> &y, const Tensor<T> &b) {
  if (b.empty())
    return;
  const std::size_t c = y.extent(0), n = y.size() / c;
  T *p = y.ptr();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ch = 0; ch < std::ptrdiff_t(c); ++ch) {
    T *row = p + ch * n;
    const T v = b[ch];
    for (std::size_t i = 0; i < n; ++i)
      row[i] += v;
  }
}

template <typename T> void accumulate_channel_sums(const Tensor<T> &dy, Tensor<T> &db) {
  const std::size_t c = dy.extent(0), n = dy.size() / c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ch = 0; ch < std::ptrdiff_t(c); ++ch) {
    const T *row = dy.ptr() + ch * n;
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      s += row[i];
    db[ch] += T(s);
  }
}

struct Conv2dGeometry {
  std::size_t ci, co, frames, h, w, kh, kw, sh, sw, ph, pw, ho, wo;
  std::size_t k() const { return ci * kh * kw; }
  std::size_t in_plane() const { return h * w; }
  std::size_t out_plane() const { return ho * wo; }
};

template <typename T>
Conv2dGeometry conv2d_geometry(const Tensor<T> &x, const Tensor<T> &w,
                               const ConvSpec &spec) {
  require(spec.dims() == 2 && spec.stride.size() == 2 &&
            spec.padding.size() == 2,
          "conv2d: spec must be two-dimensional");
  require(x.rank() >= 3, "conv2d: input needs [C, batch..., H, W], got " +
                           to_string(x.shape()));
  require(x.extent(0) == spec.in_channels,
          "conv2d: input has " + std::to_string(x.extent(0)) +
            " channels, spec expects " + std::to_string(spec.in_channels));
  const Shape want{spec.out_channels, spec.in_channels, spec.kernel[0],
                   spec.kernel[1]};
  require(w.shape() == want, "conv2d: weight shape " + to_string(w.shape()) +
                               ", expected " + to_string(want));
  Conv2dGeometry g{};
  const std::size_t r = x.rank();
  g.ci = spec.in_channels;
  g.co = spec.out_channels;
  g.h = x.extent(r - 2);
  g.w = x.extent(r - 1);
  g.frames = x.size() / (g.ci * g.h * g.w);
  g.kh = spec.kernel[0];
  g.kw = spec.kernel[1];
  g.sh = spec.stride[0];
  g.sw = spec.stride[1];
  g.ph = spec.padding[0];
  g.pw = spec.padding[1];
  g.ho = spec.output_extent(0, g.h);
  g.wo = spec.output_extent(1, g.w);
  return g;
}

// Output columns [lo, hi) whose input column ox * stride + k - pad is in range.
inline void valid_columns(std::size_t k, std::size_t stride, std::size_t pad,
                          std::size_t in, std::size_t out, std::size_t &lo,
                          std::size_t &hi) {
  lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  const long last = long(in) - 1 + long(pad) - long(k); // max ox * stride
  hi = last < 0 ? 0 : std::min(out, std::size_t(last) / stride + 1);
  lo = std::min(lo, hi);
}

// col[(ci, ky, kx), (f, oy, ox)] for frames [f0, f0 + n).
template <typename T>
void im2col2d(const T *x, const Conv2dGeometry &g, std::size_t f0,
              std::size_t n, T *col) {
  const std::size_t rows = g.k(), row_len = n * g.out_plane();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < std::ptrdiff_t(rows); ++r) {
    const std::size_t ci = r / (g.kh * g.kw);
    const std::size_t ky = (r / g.kw) % g.kh;
    const std::size_t kx = r % g.kw;
    std::size_t lo, hi;
    valid_columns(kx, g.sw, g.pw, g.w, g.wo, lo, hi);
    T *dst = col + r * row_len;
    for (std::size_t f = 0; f < n; ++f) {
      const T *src = x + (ci * g.frames + f0 + f) * g.in_plane();
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        const long iy = long(oy * g.sh + ky) - long(g.ph);
        T *out = dst + (f * g.ho + oy) * g.wo;
        if (iy < 0 || iy >= long(g.h)) {
          std::fill(out, out + g.wo, T(0));
          continue;
        }
        const T *line = src + iy * g.w + kx - g.pw;
        std::fill(out, out + lo, T(0));
        if (g.sw == 1) {
          std::copy(line + lo, line + hi, out + lo);
        } else {
          for (std::size_t ox = lo; ox < hi; ++ox)
            out[ox] = line[ox * g.sw];
        }
        std::fill(out + hi, out + g.wo, T(0));
      }
    }
  }
}

template <typename T>
void col2im2d(const T *col, const Conv2dGeometry &g, std::size_t f0,
              std::size_t n, T *dx) {
  const std::size_t row_len = n * g.out_plane();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < std::ptrdiff_t(g.ci); ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        std::size_t lo, hi;
        valid_columns(kx, g.sw, g.pw, g.w, g.wo, lo, hi);
        const T *src = col + ((ci * g.kh + ky) * g.kw + kx) * row_len;
        for (std::size_t f = 0; f < n; ++f) {
          T *dst = dx + (ci * g.frames + f0 + f) * g.in_plane();
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = long(oy * g.sh + ky) - long(g.ph);
            if (iy < 0 || iy >= long(g.h))
              continue;
            const T *in = src + (f * g.ho + oy) * g.wo;
            T *line = dst + iy * g.w + kx - g.pw;
            for (std::size_t ox = lo; ox < hi; ++ox)
              line[ox * g.sw] += in[ox];
          }
        }
      }
  }
}

struct Conv1dGeometry {
  std::size_t ci, co, outer, len, inner, k, stride, pad, out_len;
  std::size_t in_block() const { return len * inner; }
  std::size_t out_block() const { return out_len * inner; }
  bool shifted_gemm() const { return stride == 1 && inner >= 16; }
};

template <typename T>
Conv1dGeometry conv1d_geometry(const Tensor<T> &x, std::size_t axis,
                               const Tensor<T> &w, const ConvSpec &spec) {
  require(spec.dims() == 1 && spec.stride.size() == 1 &&
            spec.padding.size() == 1,
          "conv1d: spec must be one-dimensional");
  require(x.rank() >= 2, "conv1d: input needs a channel axis and at least one "
                         "more axis, got " + to_string(x.shape()));
  require(axis >= 1 && axis < x.rank(),
          "conv1d: axis " + std::to_string(axis) +
            " is not a non-channel axis of " + to_string(x.shape()));
  require(x.extent(0) == spec.in_channels,
          "conv1d: input has " + std::to_string(x.extent(0)) +
            " channels, spec expects " + std::to_string(spec.in_channels));
  const Shape want{spec.out_channels, spec.in_channels, spec.kernel[0]};
  require(w.shape() == want, "conv1d: weight shape " + to_string(w.shape()) +
                               ", expected " + to_string(want));
  Conv1dGeometry g{};
  g.ci = spec.in_channels;
  g.co = spec.out_channels;
  g.len = x.extent(axis);
  g.inner = inner_size(x.shape(), axis);
  g.outer = x.size() / (g.ci * g.len * g.inner);
  g.k = spec.kernel[0];
  g.stride = spec.stride[0];
  g.pad = spec.padding[0];
  g.out_len = spec.output_extent(0, g.len);
  return g;
}

// col[(ci, j), (o, l, i)] for outer slices [o0, o0 + n).
template <typename T>
void im2col1d(const T *x, const Conv1dGeometry &g, std::size_t o0,
              std::size_t n, T *col) {
  const std::size_t rows = g.ci * g.k, row_len = n * g.out_block();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < std::ptrdiff_t(rows); ++r) {
    const std::size_t ci = r / g.k, j = r % g.k;
    T *dst = col + r * row_len;
    for (std::size_t o = 0; o < n; ++o) {
      const T *src = x + (ci * g.outer + o0 + o) * g.in_block();
      for (std::size_t l = 0; l < g.out_len; ++l) {
        T *out = dst + (o * g.out_len + l) * g.inner;
        const long il = long(l * g.stride + j) - long(g.pad);
        if (il < 0 || il >= long(g.len))
          std::fill(out, out + g.inner, T(0));
        else
          std::copy_n(src + il * g.inner, g.inner, out);
      }
    }
  }
}

template <typename T>
void col2im1d(const T *col, const Conv1dGeometry &g, std::size_t o0,
              std::size_t n, T *dx) {
  const std::size_t row_len = n * g.out_block();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ci = 0; ci < std::ptrdiff_t(g.ci); ++ci) {
    for (std::size_t j = 0; j < g.k; ++j) {
      const T *src = col + (ci * g.k + j) * row_len;
      for (std::size_t o = 0; o < n; ++o) {
        T *dst = dx + (ci * g.outer + o0 + o) * g.in_block();
        for (std::size_t l = 0; l < g.out_len; ++l) {
          const long il = long(l * g.stride + j) - long(g.pad);
          if (il < 0 || il >= long(g.len))
            continue;
          const T *in = src + (o * g.out_len + l) * g.inner;
          T *line = dst + il * g.inner;
          for (std::size_t i = 0; i < g.inner; ++i)
            line[i] += in[i];
        }
      }
    }
  }
}

// Weight slice for tap j as a contiguous [Co, Ci] matrix.
template <typename T>
std::vector<T> tap_matrix(const Tensor<T> &w, const Conv1dGeometry &g,
                          std::size_t j) {
  std::vector<T> m(g.co * g.ci);
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = w[i * g.k + j];
  return m;
}

// Output rows [l0, l1) that read valid input for tap j (stride 1).
std::pair<std::size_t, std::size_t> tap_range(const Conv1dGeometry &g,
                                              std::size_t j) {
  const long lo = std::max(0L, long(g.pad) - long(j));
  const long hi = std::min(long(g.out_len), long(g.len + g.pad) - long(j));
  if (hi <= lo)
    return {0, 0};
  return {std::size_t(lo), std::size_t(hi)};
}

} // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T> &x, const Tensor<T> &w,
                         const Tensor<T> &b, const ConvSpec &spec) {
  const auto g = conv2d_geometry(x, w, spec);
  check_bias(b, g.co, "conv2d");
  Shape out_shape = x.shape();
  out_shape[0] = g.co;
  out_shape[out_shape.size() - 2] = g.ho;
  out_shape[out_shape.size() - 1] = g.wo;
  Tensor<T> y(out_shape);

  const std::size_t po = g.out_plane(), kk = g.k();
  const std::size_t chunk = std::max<std::size_t>(1, kColBudget / (kk * po));
  std::vector<T> col(kk * std::min(chunk, g.frames) * po);
  for (std::size_t f0 = 0; f0 < g.frames; f0 += chunk) {
    const std::size_t n = std::min(chunk, g.frames - f0);
    im2col2d(x.ptr(), g, f0, n, col.data());
    gemm(Trans::no, Trans::no, g.co, n * po, kk, T(1), w.ptr(), kk,
         col.data(), n * po, T(0), y.ptr() + f0 * po, g.frames * po);
  }
  add_channel_bias(y, b);
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T> &x, const Tensor<T> &w,
                     const Tensor<T> &dy, const ConvSpec &spec, Tensor<T> *dx,
                     Tensor<T> *dw, Tensor<T> *db) {
  const auto g = conv2d_geometry(x, w, spec);
  const std::size_t po = g.out_plane(), kk = g.k();
  const std::size_t chunk = std::max<std::size_t>(1, kColBudget / (kk * po));
  std::vector<T> col(kk * std::min(chunk, g.frames) * po);
  for (std::size_t f0 = 0; f0 < g.frames; f0 += chunk) {
    const std::size_t n = std::min(chunk, g.frames - f0);
    const T *dy_chunk = dy.ptr() + f0 * po;
    if (dw) {
      im2col2d(x.ptr(), g, f0, n, col.data());
      gemm(Trans::no, Trans::yes, g.co, kk, n * po, T(1), dy_chunk,
           g.frames * po, col.data(), n * po, T(1), dw->ptr(), kk);
    }
    if (dx) {
      gemm(Trans::yes, Trans::no, kk, n * po, g.co, T(1), w.ptr(), kk,
           dy_chunk, g.frames * po, T(0), col.data(), n * po);
      col2im2d(col.data(), g, f0, n, dx->ptr());
    }
  }
  if (db)
    accumulate_channel_sums(dy, *db);
}

template <typename T>
Tensor<T> conv1d_forward(const Tensor<T> &x, std::size_t axis,
                         const Tensor<T> &w, const Tensor<T> &b,
                         const ConvSpec &spec) {
  const auto g = conv1d_geometry(x, axis, w, spec);
  check_bias(b, g.co, "conv1d");
  Shape out_shape = x.shape();
  out_shape[0] = g.co;
  out_shape[axis] = g.out_len;
  Tensor<T> y(out_shape);

  const std::size_t y_ld = g.outer * g.out_block();
  if (g.shifted_gemm()) {
    const std::size_t x_ld = g.outer * g.in_block();
    for (std::size_t j = 0; j < g.k; ++j) {
      const auto wj = tap_matrix(w, g, j);
      const auto [l0, l1] = tap_range(g, j);
      if (l1 == l0)
        continue;
      for (std::size_t o = 0; o < g.outer; ++o) {
        const T *src = x.ptr() + o * g.in_block() + (l0 + j - g.pad) * g.inner;
        T *dst = y.ptr() + o * g.out_block() + l0 * g.inner;
        gemm(Trans::no, Trans::no, g.co, (l1 - l0) * g.inner, g.ci, T(1),
             wj.data(), g.ci, src, x_ld, T(1), dst, y_ld);
      }
    }
  } else {
    const std::size_t kk = g.ci * g.k;
    const std::size_t chunk =
      std::max<std::size_t>(1, kColBudget / (kk * g.out_block()));
    std::vector<T> col(kk * std::min(chunk, g.outer) * g.out_block());
    for (std::size_t o0 = 0; o0 < g.outer; o0 += chunk) {
      const std::size_t n = std::min(chunk, g.outer - o0);
      im2col1d(x.ptr(), g, o0, n, col.data());
      gemm(Trans::no, Trans::no, g.co, n * g.out_block(), kk, T(1), w.ptr(),
           kk, col.data(), n * g.out_block(), T(0),
           y.ptr() + o0 * g.out_block(), y_ld);
    }
  }
  add_channel_bias(y, b);
  return y;
}

template <typename T>
void conv1d_backward(const Tensor<T> &x, std::size_t axis, const Tensor<T> &w,
                     const Tensor<T> &dy, const ConvSpec &spec, Tensor<T> *dx,
                     Tensor<T> *dw, Tensor<T> *db) {
  const auto g = conv1d_geometry(x, axis, w, spec);
  const std::size_t y_ld = g.outer * g.out_block();
  if (g.shifted_gemm()) {
    const std::size_t x_ld = g.outer * g.in_block();
    for (std::size_t j = 0; j < g.k; ++j) {
      const auto [l0, l1] = tap_range(g, j);
      if (l1 == l0)
        continue;
      const auto wj = tap_matrix(w, g, j);
      std::vector<T> dwj(dw ? g.co * g.ci : 0, T(0));
      const std::size_t cols = (l1 - l0) * g.inner;
      for (std::size_t o = 0; o < g.outer; ++o) {
        const std::size_t x_off =
          o * g.in_block() + (l0 + j - g.pad) * g.inner;
        const T *dy_sub = dy.ptr() + o * g.out_block() + l0 * g.inner;
        if (dw)
          gemm(Trans::no, Trans::yes, g.co, g.ci, cols, T(1), dy_sub, y_ld,
               x.ptr() + x_off, x_ld, T(1), dwj.data(), g.ci);
        if (dx)
          gemm(Trans::yes, Trans::no, g.ci, cols, g.co, T(1), wj.data(), g.ci,
               dy_sub, y_ld, T(1), dx->ptr() + x_off, x_ld);
      }
      if (dw)
        for (std::size_t i = 0; i < dwj.size(); ++i)
          (*dw)[i * g.k + j] += dwj[i];
    }
  } else {
    const std::size_t kk = g.ci * g.k;
    const std::size_t chunk =
      std::max<std::size_t>(1, kColBudget / (kk * g.out_block()));
    std::vector<T> col(kk * std::min(chunk, g.outer) * g.out_block());
    for (std::size_t o0 = 0; o0 < g.outer; o0 += chunk) {
      const std::size_t n = std::min(chunk, g.outer - o0);
      const T *dy_chunk = dy.ptr() + o0 * g.out_block();
      if (dw) {
        im2col1d(x.ptr(), g, o0, n, col.data());
        gemm(Trans::no, Trans::yes, g.co, kk, n * g.out_block(), T(1),
             dy_chunk, y_ld, col.data(), n * g.out_block(), T(1), dw->ptr(),
             kk);
      }
      if (dx) {
        gemm(Trans::yes, Trans::no, kk, n * g.out_block(), g.co, T(1),
             w.ptr(), kk, dy_chunk, y_ld, T(0), col.data(), n * g.out_block());
        col2im1d(col.data(), g, o0, n, dx->ptr());
      }
    }
  }
  if (db)
    accumulate_channel_sums(dy, *db);
}

template <typename T>
Tensor<T> pointwise_forward(const Tensor<T> &x, const Tensor<T> &w,
                            const Tensor<T> &b) {
  require(w.rank() == 2 && x.rank() >= 1 && w.extent(1) == x.extent(0),
          "pointwise: weight " + to_string(w.shape()) +
            " does not match input " + to_string(x.shape()));
  const std::size_t ci = w.extent(1), co = w.extent(0), n = x.size() / ci;
  check_bias(b, co, "pointwise");
  Shape out_shape = x.shape();
  out_shape[0] = co;
  Tensor<T> y(out_shape);
  gemm(Trans::no, Trans::no, co, n, ci, T(1), w.ptr(), ci, x.ptr(), n, T(0),
       y.ptr(), n);
  add_channel_bias(y, b);
  return y;
}

template <typename T>
void pointwise_backward(const Tensor<T> &x, const Tensor<T> &w,
                        const Tensor<T> &dy, Tensor<T> *dx, Tensor<T> *dw,
                        Tensor<T> *db) {
  const std::size_t ci = w.extent(1), co = w.extent(0), n = x.size() / ci;
  if (dw)
    gemm(Trans::no, Trans::yes, co, ci, n, T(1), dy.ptr(), n, x.ptr(), n, T(1),
         dw->ptr(), ci);
  if (dx)
    gemm(Trans::yes, Trans::no, ci, n, co, T(1), w.ptr(), ci, dy.ptr(), n,
         T(1), dx->ptr(), n);
  if (db)
    accumulate_channel_sums(dy, *db);
}

namespace {
template <typename T>
void check_bn_params(const Tensor<T> &x, const Tensor<T> &gamma,
                     const Tensor<T> &beta) {
  require(x.rank() >= 2, "batchnorm: input needs a channel axis and at least "
                         "one more axis, got " + to_string(x.shape()));
  const Shape c{x.extent(0)};
  require(gamma.shape() == c && beta.shape() == c,
          "batchnorm: input has " + std::to_string(x.extent(0)) +
            " channels but parameters have shape " + to_string(gamma.shape()));
}
} // namespace

template <typename T>
Tensor<T> batchnorm_train_forward(const Tensor<T> &x, const Tensor<T> &gamma,
                                  const Tensor<T> &beta, T eps, T momentum,
                                  Tensor<T> &running_mean,
                                  Tensor<T> &running_var,
                                  BatchStats<T> &saved) {
  check_bn_params(x, gamma, beta);
  require(running_mean.shape() == gamma.shape() &&
            running_var.shape() == gamma.shape(),
          "batchnorm: running statistics do not match channel count");
  const std::size_t c = x.extent(0), n = x.size() / c;
  saved.mean.assign(c, 0.0);
  saved.inv_std.assign(c, 0.0);
  std::vector<double> var(c);
  Tensor<T> y(x.shape());
  bool finite = true;
#pragma omp parallel for schedule(static) reduction(&& : finite)
  for (std::ptrdiff_t ch = 0; ch < std::ptrdiff_t(c); ++ch) {
    const T *row = x.ptr() + ch * n;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i)
      mean += row[i];
    mean /= double(n);
    double v = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = row[i] - mean;
      v += d * d;
    }
    v /= double(n);
    finite = finite && std::isfinite(mean) && std::isfinite(v);
    const double inv = 1.0 / std::sqrt(v + double(eps));
    saved.mean[ch] = mean;
    saved.inv_std[ch] = inv;
    var[ch] = v;
    const double scale = double(gamma[ch]) * inv;
    const double shift = double(beta[ch]) - mean * scale;
    T *out = y.ptr() + ch * n;
    for (std::size_t i = 0; i < n; ++i)
      out[i] = T(row[i] * scale + shift);
  }
  if (!finite)
    throw NumericError("batchnorm: non-finite batch statistics");
  const double unbias = n > 1 ? double(n) / double(n - 1) : 1.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    running_mean[ch] = T((1 - double(momentum)) * running_mean[ch] +
                         double(momentum) * saved.mean[ch]);
    running_var[ch] = T((1 - double(momentum)) * running_var[ch] +
                        double(momentum) * var[ch] * unbias);
  }
  return y;
}

template <typename T>
void batchnorm_train_backward(const Tensor<T> &x, const Tensor<T> &gamma,
                              const Tensor<T> &dy, const BatchStats<T> &saved,
                              Tensor<T> *dx, Tensor<T> *dgamma,
                              Tensor<T> *dbeta) {
  const std::size_t c = x.extent(0), n = x.size() / c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ch = 0; ch < std::ptrdiff_t(c); ++ch) {
    const T *xr = x.ptr() + ch * n;
    const T *gr = dy.ptr() + ch * n;
    const double mean = saved.mean[ch], inv = saved.inv_std[ch];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += gr[i];
      sum_dy_xhat += gr[i] * (xr[i] - mean) * inv;
    }
    if (dgamma)
      (*dgamma)[ch] += T(sum_dy_xhat);
    if (dbeta)
      (*dbeta)[ch] += T(sum_dy);
    if (dx) {
      const double k = double(gamma[ch]) * inv / double(n);
      const double mean_dy = sum_dy, mean_dyx = sum_dy_xhat;
      T *out = dx->ptr() + ch * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double xhat = (xr[i] - mean) * inv;
        out[i] += T(k * (double(n) * gr[i] - mean_dy - xhat * mean_dyx));
      }
    }
  }
}

template <typename T>
Tensor<T> batchnorm_infer_forward(Tensor<T> x, const Tensor<T> &gamma,
                                  const Tensor<T> &beta,
                                  const Tensor<T> &running_mean,
                                  const Tensor<T> &running_var, T eps) {
  check_bn_params(x, gamma, beta);
  require(running_mean.shape() == gamma.shape() &&
            running_var.shape() == gamma.shape(),
          "batchnorm: running statistics do not match channel count");
  const std::size_t c = x.extent(0), n = x.size() / c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ch = 0; ch < std::ptrdiff_t(c); ++ch) {
    const double inv = 1.0 / std::sqrt(double(running_var[ch]) + double(eps));
    const T scale = T(double(gamma[ch]) * inv);
    const T shift = T(double(beta[ch]) - double(running_mean[ch]) * scale);
    T *row = x.ptr() + ch * n;
    for (std::size_t i = 0; i < n; ++i)
      row[i] = row[i] * scale + shift;
  }
  return x;
}

template <typename T>
void batchnorm_infer_backward(const Tensor<T> &x, const Tensor<T> &gamma,
                              const Tensor<T> &running_mean,
                              const Tensor<T> &running_var, T eps,
                              const Tensor<T> &dy, Tensor<T> *dx,
                              Tensor<T> *dgamma, Tensor<T> *dbeta) {
  const std::size_t c = x.extent(0), n = x.size() / c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ch = 0; ch < std::ptrdiff_t(c); ++ch) {
    const double inv = 1.0 / std::sqrt(double(running_var[ch]) + double(eps));
    const T *xr = x.ptr() + ch * n;
    const T *gr = dy.ptr() + ch * n;
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += gr[i];
      sum_dy_xhat += gr[i] * (xr[i] - double(running_mean[ch])) * inv;
    }
    if (dgamma)
      (*dgamma)[ch] += T(sum_dy_xhat);
    if (dbeta)
      (*dbeta)[ch] += T(sum_dy);
    if (dx) {
      const T k = T(double(gamma[ch]) * inv);
      T *out = dx->ptr() + ch * n;
      for (std::size_t i = 0; i < n; ++i)
        out[i] += gr[i] * k;
    }
  }
}

template <typename T> void relu_inplace(Tensor<T> &x) {
  T *p = x.ptr();
  const std::ptrdiff_t n = std::ptrdiff_t(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    p[i] = p[i] > T(0) ? p[i] : T(0);
}

template <typename T>
void relu_backward(const Tensor<T> &y, const Tensor<T> &dy, Tensor<T> &dx) {
  const std::ptrdiff_t n = std::ptrdiff_t(y.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    if (y[i] > T(0))
      dx[i] += dy[i];
}

std::vector<std::size_t> normalize_axes(std::vector<std::size_t> axes,
                                        std::size_t rank) {
  std::sort(axes.begin(), axes.end());
  require(std::adjacent_find(axes.begin(), axes.end()) == axes.end(),
          "repeated axis in axis set");
  for (auto a : axes)
    require(a < rank, "axis " + std::to_string(a) + " out of range for rank " +
                        std::to_string(rank));
  return axes;
}

namespace {
// Input positions [lo, hi) covered by output position `o`; never empty
// because padding is smaller than the kernel.
inline void window_range(std::size_t o, std::size_t stride, std::size_t pad,
                         std::size_t k, std::size_t len, std::size_t &lo,
                         std::size_t &hi) {
  const long start = long(o * stride) - long(pad);
  lo = std::size_t(std::max(start, 0L));
  hi = std::size_t(std::min(start + long(k), long(len)));
}

// One pooling pass over the middle axis of an [outer, len, inner] view.
// `src_idx` maps each source element to its index in the original tensor;
// null means the source is the original tensor. Ties keep the earliest
// position.
template <typename T>
void pool_pass(const T *src, const std::uint32_t *src_idx, std::size_t outer,
               std::size_t len, std::size_t inner, std::size_t k,
               std::size_t stride, std::size_t pad, std::size_t out_len, T *dst,
               std::uint32_t *dst_idx) {
  if (inner == 1) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t o = 0; o < std::ptrdiff_t(outer); ++o)
      for (std::size_t l = 0; l < out_len; ++l) {
        std::size_t lo, hi;
        window_range(l, stride, pad, k, len, lo, hi);
        const std::size_t base = std::size_t(o) * len;
        T best = src[base + lo];
        std::uint32_t at = src_idx ? src_idx[base + lo] : std::uint32_t(base + lo);
        for (std::size_t j = lo + 1; j < hi; ++j) {
          const std::uint32_t idx = src_idx ? src_idx[base + j] : std::uint32_t(base + j);
          const std::uint32_t take = -std::uint32_t(src[base + j] > best);
          at = (at & ~take) | (idx & take);
          best = std::max(best, src[base + j]);
        }
        dst[std::size_t(o) * out_len + l] = best;
        dst_idx[std::size_t(o) * out_len + l] = at;
      }
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t o = 0; o < std::ptrdiff_t(outer); ++o)
    for (std::size_t l = 0; l < out_len; ++l) {
      std::size_t lo, hi;
      window_range(l, stride, pad, k, len, lo, hi);
      T *__restrict y = dst + (std::size_t(o) * out_len + l) * inner;
      std::uint32_t *__restrict yi = dst_idx + (std::size_t(o) * out_len + l) * inner;
      const std::size_t first = (std::size_t(o) * len + lo) * inner;
      std::copy_n(src + first, inner, y);
      if (src_idx)
        std::copy_n(src_idx + first, inner, yi);
      else
        for (std::size_t i = 0; i < inner; ++i)
          yi[i] = std::uint32_t(first + i);
      for (std::size_t j = lo + 1; j < hi; ++j) {
        const std::size_t base = (std::size_t(o) * len + j) * inner;
        const T *__restrict row = src + base;
        if (src_idx) {
          const std::uint32_t *__restrict ri = src_idx + base;
          for (std::size_t i = 0; i < inner; ++i) {
            const std::uint32_t take = -std::uint32_t(row[i] > y[i]);
            yi[i] = (yi[i] & ~take) | (ri[i] & take);
            y[i] = std::max(y[i], row[i]);
          }
        } else {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::uint32_t take = -std::uint32_t(row[i] > y[i]);
            yi[i] = (yi[i] & ~take) | (std::uint32_t(base + i) & take);
            y[i] = std::max(y[i], row[i]);
          }
        }
      }
    }
}
} // namespace

template <typename T>
Tensor<T> maxpool_forward(const Tensor<T> &x,
                          const std::vector<std::size_t> &axes_in,
                          std::size_t kernel, std::size_t stride,
                          std::size_t pad, ArgIndex &argmax) {
  const auto axes = normalize_axes(axes_in, x.rank());
  require(axes.size() == 1 || axes.size() == 2,
          "maxpool: pooling over one or two axes is supported");
  require(pad < kernel, "maxpool: padding must be smaller than the window");
  require(x.size() < std::numeric_limits<std::uint32_t>::max(),
          "maxpool: tensor too large for 32-bit indices");

  // The window is separable. The earlier axis goes first because its pass
  // vectorizes over the contiguous later axes and shrinks the data the
  // second pass reads. Source indices are carried through.
  Tensor<T> cur;
  ArgIndex cur_idx;
  const Tensor<T> *src = &x;
  for (const std::size_t a : axes) {
    const Shape &in_shape = src->shape();
    const std::size_t len = in_shape[a];
    const std::size_t out_len = window_output_extent(len, kernel, stride, pad);
    Shape out_shape = in_shape;
    out_shape[a] = out_len;
    Tensor<T> out(out_shape);
    ArgIndex out_idx(out.size());
    pool_pass(src->ptr(), src == &x ? nullptr : cur_idx.data(),
              outer_size(in_shape, a), len, inner_size(in_shape, a), kernel,
              stride, pad, out_len, out.ptr(), out_idx.data());
    cur = std::move(out);
    cur_idx = std::move(out_idx);
    src = &cur;
  }
  argmax = std::move(cur_idx);
  return cur;
}

template <typename T>
void maxpool_backward(const Tensor<T> &dy, const ArgIndex &argmax,
                      Tensor<T> &dx) {
  // Windows overlap, so the scatter stays serial.
  for (std::size_t i = 0; i < dy.size(); ++i)
    dx[argmax[i]] += dy[i];
}

namespace {
struct ReduceLayout {
  Shape out_shape;
  std::vector<std::size_t> reduced_offsets; // within one reduction block
  std::vector<std::size_t> kept_axes;
  std::vector<std::size_t> strides;
};

ReduceLayout reduce_layout(const Shape &shape,
                           const std::vector<std::size_t> &axes) {
  ReduceLayout r;
  r.strides.assign(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;)
    r.strides[i - 1] = r.strides[i] * shape[i];
  std::vector<bool> reduced(shape.size(), false);
  for (auto a : axes)
    reduced[a] = true;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (!reduced[i]) {
      r.kept_axes.push_back(i);
      r.out_shape.push_back(shape[i]);
    }
  r.reduced_offsets = {0};
  for (auto a : axes) {
    std::vector<std::size_t> next;
    next.reserve(r.reduced_offsets.size() * shape[a]);
    for (auto off : r.reduced_offsets)
      for (std::size_t k = 0; k < shape[a]; ++k)
        next.push_back(off + k * r.strides[a]);
    r.reduced_offsets = std::move(next);
  }
  return r;
}

std::size_t base_offset(const ReduceLayout &r, std::size_t out_index) {
  std::size_t off = 0;
  for (std::size_t k = r.kept_axes.size(); k-- > 0;) {
    const std::size_t ext = r.out_shape[k];
    off += (out_index % ext) * r.strides[r.kept_axes[k]];
    out_index /= ext;
  }
  return off;
}
} // namespace

template <typename T>
Tensor<T> global_reduce_forward(const Tensor<T> &x,
                                const std::vector<std::size_t> &axes_in,
                                ReduceOp op, ArgIndex &argmax) {
  require(!axes_in.empty(), "global_reduce: axis set must be non-empty");
  const auto axes = normalize_axes(axes_in, x.rank());
  const auto r = reduce_layout(x.shape(), axes);
  Tensor<T> y(r.out_shape);
  if (op == ReduceOp::max)
    argmax.assign(y.size(), 0);
  const double count = double(r.reduced_offsets.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t o = 0; o < std::ptrdiff_t(y.size()); ++o) {
    const std::size_t base = base_offset(r, o);
    if (op == ReduceOp::max) {
      std::size_t best = base + r.reduced_offsets[0];
      for (auto off : r.reduced_offsets)
        if (x[base + off] > x[best])
          best = base + off;
      y[o] = x[best];
      argmax[o] = std::uint32_t(best);
    } else {
      double s = 0;
      for (auto off : r.reduced_offsets)
        s += x[base + off];
      y[o] = T(s / count);
    }
  }
  return y;
}

template <typename T>
void global_reduce_backward(const Shape &x_shape,
                            const std::vector<std::size_t> &axes_in,
                            ReduceOp op, const Tensor<T> &dy,
                            const ArgIndex &argmax, Tensor<T> &dx) {
  if (op == ReduceOp::max) {
    for (std::size_t o = 0; o < dy.size(); ++o)
      dx[argmax[o]] += dy[o];
    return;
  }
  const auto axes = normalize_axes(axes_in, x_shape.size());
  const auto r = reduce_layout(x_shape, axes);
  const T scale = T(1.0 / double(r.reduced_offsets.size()));
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t o = 0; o < std::ptrdiff_t(dy.size()); ++o) {
    const std::size_t base = base_offset(r, o);
    for (auto off : r.reduced_offsets)
      dx[base + off] += dy[o] * scale;
  }
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T> &x, const Tensor<T> &w,
                         const Tensor<T> &b) {
  require(w.rank() == 2 && x.rank() >= 1 &&
            x.extent(x.rank() - 1) == w.extent(1),
          "linear: input " + to_string(x.shape()) +
            " does not match weight " + to_string(w.shape()));
  const std::size_t din = w.extent(1), dout = w.extent(0), n = x.size() / din;
  require(b.empty() || b.shape() == Shape{dout},
          "linear: bias must have shape [" + std::to_string(dout) + "]");
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor<T> y(out_shape);
  if (!b.empty())
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(b.ptr(), dout, y.ptr() + r * dout);
  gemm(Trans::no, Trans::yes, n, dout, din, T(1), x.ptr(), din, w.ptr(), din,
       b.empty() ? T(0) : T(1), y.ptr(), dout);
  return y;
}

template <typename T>
void linear_backward(const Tensor<T> &x, const Tensor<T> &w,
                     const Tensor<T> &dy, Tensor<T> *dx, Tensor<T> *dw,
                     Tensor<T> *db) {
  const std::size_t din = w.extent(1), dout = w.extent(0), n = x.size() / din;
  if (dx)
    gemm(Trans::no, Trans::no, n, din, dout, T(1), dy.ptr(), dout, w.ptr(),
         din, T(1), dx->ptr(), din);
  if (dw)
    gemm(Trans::yes, Trans::no, dout, din, n, T(1), dy.ptr(), dout, x.ptr(),
         din, T(1), dw->ptr(), din);
  if (db)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < dout; ++j)
        (*db)[j] += dy[r * dout + j];
}

template <typename T>
Tensor<T> permute(const Tensor<T> &x, const std::vector<std::size_t> &order) {
  require(order.size() == x.rank(), "permute: order must list every axis");
  auto sorted = order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    require(sorted[i] == i, "permute: order is not a permutation");
  const std::size_t r = x.rank();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;)
    in_strides[i - 1] = in_strides[i] * x.extent(i);
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.extent(order[i]);
    strides[i] = in_strides[order[i]];
  }
  Tensor<T> y(out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < y.size(); ++o) {
    y[o] = x[src];
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += strides[d];
        break;
      }
      src -= (out_shape[d] - 1) * strides[d];
      idx[d] = 0;
    }
  }
  return y;
}

#define LASD_INSTANTIATE(T)                                                    \
  template Tensor<T> conv2d_forward(const Tensor<T> &, const Tensor<T> &,      \
                                    const Tensor<T> &, const ConvSpec &);      \
  template void conv2d_backward(const Tensor<T> &, const Tensor<T> &,          \
                                const Tensor<T> &, const ConvSpec &,           \
                                Tensor<T> *, Tensor<T> *, Tensor<T> *);        \
  template Tensor<T> conv1d_forward(const Tensor<T> &, std::size_t,            \
                                    const Tensor<T> &, const Tensor<T> &,      \
                                    const ConvSpec &);                         \
  template void conv1d_backward(const Tensor<T> &, std::size_t,                \
                                const Tensor<T> &, const Tensor<T> &,          \
                                const ConvSpec &, Tensor<T> *, Tensor<T> *,    \
                                Tensor<T> *);                                  \
  template Tensor<T> pointwise_forward(const Tensor<T> &, const Tensor<T> &,   \
                                       const Tensor<T> &);                     \
  template void pointwise_backward(const Tensor<T> &, const Tensor<T> &,       \
                                   const Tensor<T> &, Tensor<T> *,             \
                                   Tensor<T> *, Tensor<T> *);                  \
  template Tensor<T> batchnorm_train_forward(                                  \
    const Tensor<T> &, const Tensor<T> &, const Tensor<T> &, T, T,             \
    Tensor<T> &, Tensor<T> &, BatchStats<T> &);                                \
  template void batchnorm_train_backward(                                      \
    const Tensor<T> &, const Tensor<T> &, const Tensor<T> &,                   \
    const BatchStats<T> &, Tensor<T> *, Tensor<T> *, Tensor<T> *);             \
  template Tensor<T> batchnorm_infer_forward(                                  \
    Tensor<T>, const Tensor<T> &, const Tensor<T> &, const Tensor<T> &,        \
    const Tensor<T> &, T);                                                     \
  template void batchnorm_infer_backward(                                      \
    const Tensor<T> &, const Tensor<T> &, const Tensor<T> &,                   \
    const Tensor<T> &, T, const Tensor<T> &, Tensor<T> *, Tensor<T> *,         \
    Tensor<T> *);                                                              \
  template void relu_inplace(Tensor<T> &);                                     \
  template void relu_backward(const Tensor<T> &, const Tensor<T> &,            \
                              Tensor<T> &);                                    \
  template Tensor<T> maxpool_forward(const Tensor<T> &,                        \
                                     const std::vector<std::size_t> &,         \
                                     std::size_t, std::size_t, std::size_t,    \
                                     ArgIndex &);                              \
  template void maxpool_backward(const Tensor<T> &, const ArgIndex &,          \
                                 Tensor<T> &);                                 \
  template Tensor<T> global_reduce_forward(                                    \
    const Tensor<T> &, const std::vector<std::size_t> &, ReduceOp,             \
    ArgIndex &);                                                               \
  template void global_reduce_backward(const Shape &,                          \
                                       const std::vector<std::size_t> &,       \
                                       ReduceOp, const Tensor<T> &,            \
                                       const ArgIndex &, Tensor<T> &);         \
  template Tensor<T> linear_forward(const Tensor<T> &, const Tensor<T> &,      \
                                    const Tensor<T> &);                        \
  template void linear_backward(const Tensor<T> &, const Tensor<T> &,          \
                                const Tensor<T> &, Tensor<T> *, Tensor<T> *,   \
                                Tensor<T> *);                                  \
  template Tensor<T> permute(const Tensor<T> &,                                \
                             const std::vector<std::size_t> &);

LASD_INSTANTIATE(float)
LASD_INSTANTIATE(double)
#undef LASD_INSTANTIATE

} // namespace kernels
} // namespace lasd
