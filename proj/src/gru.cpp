// SPDX-License-Identifier: Apache-2.0
#include <lasd/gru.hpp>
#include <lasd/kernels.hpp>
#include <lasd/ops.hpp>

#include <cmath>
#include <memory>

namespace lasd {

namespace k = kernels;

namespace {

template <typename T> T sigmoid(T v) { return T(1) / (T(1) + std::exp(-v)); }

struct GruDims {
  std::size_t batch, steps, in, hidden;
};

template <typename T>
GruDims check_dims(const Shape &x, const Shape &w_ih, const Shape &w_hh,
                   const Shape &b_ih, const Shape &b_hh) {
  if (x.size() != 3)
    throw ShapeError("gru: input must be [B, T, D], got " + to_string(x));
  if (w_hh.size() != 2 || w_hh[0] != 3 * w_hh[1])
    throw ShapeError("gru: weight_hh must be [3H, H], got " + to_string(w_hh));
  const std::size_t h = w_hh[1];
  if (w_ih != Shape{3 * h, x[2]})
    throw ShapeError("gru: weight_ih " + to_string(w_ih) + " does not match [" +
                     std::to_string(3 * h) + ", " + std::to_string(x[2]) + "]");
  if (b_ih != Shape{3 * h} || b_hh != Shape{3 * h})
    throw ShapeError("gru: biases must be [" + std::to_string(3 * h) + "]");
  return {x[0], x[1], x[2], h};
}

template <typename T> struct GruSaved {
  Tensor<T> r, z, n, ghn; // [B, T, H] each
  Tensor<T> h0;           // [B, H]
};

} // namespace

template <typename T>
Var<T> gru_sequence(const Var<T> &x, const Var<T> &w_ih, const Var<T> &w_hh,
                    const Var<T> &b_ih, const Var<T> &b_hh, bool reverse,
                    const Var<T> &h0) {
  const GruDims d = check_dims<T>(x.shape(), w_ih.shape(), w_hh.shape(),
                                  b_ih.shape(), b_hh.shape());
  const std::size_t B = d.batch, S = d.steps, H = d.hidden;
  if (h0.defined() && h0.shape() != Shape{B, H})
    throw ShapeError("gru: initial state must be " + to_string(Shape{B, H}) +
                     ", got " + to_string(h0.shape()));

  const Tensor<T> gi = k::linear_forward(x.value(), w_ih.value(), b_ih.value());
  auto saved = std::make_shared<GruSaved<T>>();
  saved->r = saved->z = saved->n = saved->ghn = Tensor<T>({B, S, H});
  saved->h0 = h0.defined() ? h0.value() : Tensor<T>({B, H});
  Tensor<T> out({B, S, H});
  Tensor<T> h = saved->h0;

  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t t = reverse ? S - 1 - s : s;
    const Tensor<T> gh = k::linear_forward(h, w_hh.value(), b_hh.value());
    for (std::size_t b = 0; b < B; ++b) {
      const T *gx = gi.ptr() + (b * S + t) * 3 * H;
      const T *gr = gh.ptr() + b * 3 * H;
      const std::size_t row = (b * S + t) * H;
      for (std::size_t j = 0; j < H; ++j) {
        const T r = sigmoid(gx[j] + gr[j]);
        const T z = sigmoid(gx[H + j] + gr[H + j]);
        const T n = std::tanh(gx[2 * H + j] + r * gr[2 * H + j]);
        T &hj = h[b * H + j];
        hj = (T(1) - z) * n + z * hj;
        saved->r[row + j] = r;
        saved->z[row + j] = z;
        saved->n[row + j] = n;
        saved->ghn[row + j] = gr[2 * H + j];
        out[row + j] = hj;
      }
    }
  }

  return record_op<T>(
    std::move(out),
    {&x, &w_ih, &w_hh, &b_ih, &b_hh, h0.defined() ? &h0 : nullptr},
    [saved, d, reverse](OpNode<T> &self) {
      const std::size_t B = d.batch, S = d.steps, H = d.hidden;
      const Tensor<T> &w_hh = self.input_value(2);
      Tensor<T> dgi({B, S, 3 * H});
      Tensor<T> dh({B, H}), dgh({B, 3 * H}), h_prev({B, H});
      for (std::size_t s = S; s-- > 0;) {
        const std::size_t t = reverse ? S - 1 - s : s;
        if (s == 0) {
          h_prev = saved->h0;
        } else {
          const std::size_t tp = reverse ? t + 1 : t - 1;
          for (std::size_t b = 0; b < B; ++b)
            std::copy_n(self.value.ptr() + (b * S + tp) * H, H,
                        h_prev.ptr() + b * H);
        }
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t row = (b * S + t) * H;
          T *gx = dgi.ptr() + (b * S + t) * 3 * H;
          T *gr = dgh.ptr() + b * 3 * H;
          for (std::size_t j = 0; j < H; ++j) {
            T &g = dh[b * H + j];
            g += self.grad[row + j];
            const T r = saved->r[row + j], z = saved->z[row + j],
                    n = saved->n[row + j];
            const T dn = g * (T(1) - z) * (T(1) - n * n);
            const T dz = g * (h_prev[b * H + j] - n) * z * (T(1) - z);
            const T dr = dn * saved->ghn[row + j] * r * (T(1) - r);
            gx[j] = gr[j] = dr;
            gx[H + j] = gr[H + j] = dz;
            gx[2 * H + j] = dn;
            gr[2 * H + j] = dn * r;
            g *= z;
          }
        }
        k::linear_backward(h_prev, w_hh, dgh, &dh, self.input_grad(2),
                           self.input_grad(4));
      }
      if (auto *g = self.input_grad(5))
        for (std::size_t i = 0; i < g->size(); ++i)
          (*g)[i] += dh[i];
      k::linear_backward(self.input_value(0), self.input_value(1), dgi,
                         self.input_grad(0), self.input_grad(1),
                         self.input_grad(3));
    });
}

template <typename T>
Var<T> gru_cell(const Var<T> &x, const Var<T> &h_prev, const Var<T> &w_ih,
                const Var<T> &w_hh, const Var<T> &b_ih, const Var<T> &b_hh) {
  if (x.shape().size() != 2)
    throw ShapeError("gru_cell: input must be [B, D], got " +
                     to_string(x.shape()));
  const std::size_t B = x.shape()[0];
  auto seq = gru_sequence(reshape(x, {B, 1, x.shape()[1]}), w_ih, w_hh, b_ih,
                          b_hh, false, h_prev);
  const std::size_t H = seq.shape()[2];
  return reshape(std::move(seq), {B, H});
}

template <typename T>
Tensor<T> gru_cell(const Tensor<T> &x, const Tensor<T> &h_prev,
                   const GruWeights<T> &w) {
  const bool single = x.shape().size() == 1;
  const Shape xs = single ? Shape{1, x.size()} : x.shape();
  const Shape hs = single ? Shape{1, h_prev.size()} : h_prev.shape();
  auto h = gru_cell(constant(x.reshaped(xs)), constant(h_prev.reshaped(hs)),
                    constant(w.weight_ih), constant(w.weight_hh),
                    constant(w.bias_ih), constant(w.bias_hh));
  Tensor<T> out = std::move(h).take();
  if (single)
    out.reshape({out.size()});
  return out;
}

#define LASD_INSTANTIATE(T)                                                    \
  template Var<T> gru_sequence(const Var<T> &, const Var<T> &, const Var<T> &, \
                               const Var<T> &, const Var<T> &, bool,           \
                               const Var<T> &);                                \
  template Var<T> gru_cell(const Var<T> &, const Var<T> &, const Var<T> &,     \
                           const Var<T> &, const Var<T> &, const Var<T> &);    \
  template Tensor<T> gru_cell(const Tensor<T> &, const Tensor<T> &,            \
                              const GruWeights<T> &);

LASD_INSTANTIATE(float)
LASD_INSTANTIATE(double)
#undef LASD_INSTANTIATE

} // namespace lasd
