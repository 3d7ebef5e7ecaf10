// SPDX-License-Identifier: Apache-2.0
#include <lasd/ops.hpp>

#include <memory>

namespace lasd {

namespace k = kernels;

template <typename T>
BatchNormState<T> BatchNormState<T>::identity(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor<T>({channels}, T(1));
  s.beta = Tensor<T>({channels}, T(0));
  s.running_mean = Tensor<T>({channels}, T(0));
  s.running_var = Tensor<T>({channels}, T(1));
  return s;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T> &x, BatchNormState<T> &s) {
  if (s.mode == BnMode::train) {
    k::BatchStats<T> saved;
    return k::batchnorm_train_forward(x, s.gamma, s.beta, s.eps, s.momentum,
                                      s.running_mean, s.running_var, saved);
  }
  return k::batchnorm_infer_forward(x, s.gamma, s.beta, s.running_mean,
                                    s.running_var, s.eps);
}

template <typename T> Var<T> add(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  const bool grad = a.requires_grad() || b.requires_grad();
  Tensor<T> out = grad ? a.value() : std::move(a).take();
  const Tensor<T> &rhs = b.value();
  T *p = out.ptr();
  const std::ptrdiff_t n = std::ptrdiff_t(out.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    p[i] += rhs[i];
  return record_op<T>(std::move(out), {&a, &b}, [](OpNode<T> &self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto *g = self.input_grad(i))
        for (std::size_t j = 0; j < g->size(); ++j)
          (*g)[j] += self.grad[j];
  });
}

template <typename T> Var<T> mul(const Var<T> &a, const Var<T> &b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + " differ");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] *= b.value()[i];
  return record_op<T>(std::move(out), {&a, &b}, [](OpNode<T> &self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto *g = self.input_grad(i)) {
        const auto &other = self.input_value(1 - i);
        for (std::size_t j = 0; j < g->size(); ++j)
          (*g)[j] += self.grad[j] * other[j];
      }
  });
}

template <typename T> Var<T> scale(const Var<T> &a, T factor) {
  Tensor<T> out = a.value();
  for (auto &v : out.data())
    v *= factor;
  return record_op<T>(std::move(out), {&a}, [factor](OpNode<T> &self) {
    if (auto *g = self.input_grad(0))
      for (std::size_t j = 0; j < g->size(); ++j)
        (*g)[j] += self.grad[j] * factor;
  });
}

template <typename T> Var<T> sum(const Var<T> &a) {
  double s = 0;
  for (auto v : a.value().data())
    s += v;
  return record_op<T>(Tensor<T>({1}, T(s)), {&a}, [](OpNode<T> &self) {
    if (auto *g = self.input_grad(0))
      for (auto &v : g->data())
        v += self.grad[0];
  });
}

template <typename T> Var<T> dot(const Var<T> &a, const Tensor<T> &weights) {
  if (a.value().size() != weights.size())
    throw ShapeError("dot: weight count does not match input " +
                     to_string(a.shape()));
  double s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i)
    s += double(a.value()[i]) * double(weights[i]);
  return record_op<T>(Tensor<T>({1}, T(s)), {&a},
                      [weights](OpNode<T> &self) {
                        if (auto *g = self.input_grad(0))
                          for (std::size_t j = 0; j < g->size(); ++j)
                            (*g)[j] += self.grad[0] * weights[j];
                      });
}

template <typename T> Var<T> relu(Var<T> x) {
  Tensor<T> out = x.requires_grad() ? x.value() : std::move(x).take();
  k::relu_inplace(out);
  return record_op<T>(std::move(out), {&x}, [](OpNode<T> &self) {
    if (auto *g = self.input_grad(0))
      k::relu_backward(self.value, self.grad, *g);
  });
}

namespace {
template <typename T> const Tensor<T> &value_or_empty(const Var<T> &v) {
  static const Tensor<T> empty;
  return v.defined() ? v.value() : empty;
}
} // namespace

template <typename T>
Var<T> conv2d(const Var<T> &x, const ConvSpec &spec, const Var<T> &w,
              const Var<T> &b) {
  auto out = k::conv2d_forward(x.value(), w.value(), value_or_empty(b), spec);
  return record_op<T>(std::move(out), {&x, &w, b.defined() ? &b : nullptr},
                      [spec](OpNode<T> &self) {
                        k::conv2d_backward(self.input_value(0),
                                           self.input_value(1), self.grad, spec,
                                           self.input_grad(0),
                                           self.input_grad(1),
                                           self.input_grad(2));
                      });
}

template <typename T>
Var<T> conv1d_along(const Var<T> &x, std::size_t axis, const ConvSpec &spec,
                    const Var<T> &w, const Var<T> &b) {
  auto out =
    k::conv1d_forward(x.value(), axis, w.value(), value_or_empty(b), spec);
  return record_op<T>(std::move(out), {&x, &w, b.defined() ? &b : nullptr},
                      [spec, axis](OpNode<T> &self) {
                        k::conv1d_backward(self.input_value(0), axis,
                                           self.input_value(1), self.grad, spec,
                                           self.input_grad(0),
                                           self.input_grad(1),
                                           self.input_grad(2));
                      });
}

template <typename T>
Var<T> pointwise(const Var<T> &x, const Var<T> &w, const Var<T> &b) {
  auto out = k::pointwise_forward(x.value(), w.value(), value_or_empty(b));
  return record_op<T>(std::move(out), {&x, &w, b.defined() ? &b : nullptr},
                      [](OpNode<T> &self) {
                        k::pointwise_backward(
                          self.input_value(0), self.input_value(1), self.grad,
                          self.input_grad(0), self.input_grad(1),
                          self.input_grad(2));
                      });
}

template <typename T>
Var<T> batchnorm_train(const Var<T> &x, const Var<T> &gamma,
                       const Var<T> &beta, Tensor<T> &running_mean,
                       Tensor<T> &running_var, T eps, T momentum) {
  auto saved = std::make_shared<k::BatchStats<T>>();
  auto out = k::batchnorm_train_forward(x.value(), gamma.value(), beta.value(),
                                        eps, momentum, running_mean,
                                        running_var, *saved);
  return record_op<T>(std::move(out), {&x, &gamma, &beta},
                      [saved](OpNode<T> &self) {
                        k::batchnorm_train_backward(
                          self.input_value(0), self.input_value(1), self.grad,
                          *saved, self.input_grad(0), self.input_grad(1),
                          self.input_grad(2));
                      });
}

template <typename T>
Var<T> batchnorm_infer(Var<T> x, const Var<T> &gamma, const Var<T> &beta,
                       const Tensor<T> &running_mean,
                       const Tensor<T> &running_var, T eps) {
  const bool grad =
    x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Tensor<T> in = grad ? x.value() : std::move(x).take();
  auto out = k::batchnorm_infer_forward(std::move(in), gamma.value(),
                                        beta.value(), running_mean,
                                        running_var, eps);
  if (!grad)
    return constant(std::move(out));
  return record_op<T>(
    std::move(out), {&x, &gamma, &beta},
    [mean = running_mean, var = running_var, eps](OpNode<T> &self) {
      k::batchnorm_infer_backward(self.input_value(0), self.input_value(1),
                                  mean, var, eps, self.grad,
                                  self.input_grad(0), self.input_grad(1),
                                  self.input_grad(2));
    });
}

template <typename T>
Var<T> maxpool_along(const Var<T> &x, const std::vector<std::size_t> &axes,
                     std::size_t kernel, std::size_t stride, std::size_t pad) {
  auto argmax = std::make_shared<ArgIndex>();
  auto out = k::maxpool_forward(x.value(), axes, kernel, stride, pad, *argmax);
  if (!x.requires_grad())
    return constant(std::move(out));
  return record_op<T>(std::move(out), {&x}, [argmax](OpNode<T> &self) {
    if (auto *g = self.input_grad(0))
      k::maxpool_backward(self.grad, *argmax, *g);
  });
}

template <typename T>
Var<T> global_reduce(const Var<T> &x, const std::vector<std::size_t> &axes,
                     ReduceOp op) {
  auto argmax = std::make_shared<ArgIndex>();
  auto out = k::global_reduce_forward(x.value(), axes, op, *argmax);
  return record_op<T>(std::move(out), {&x},
                      [argmax, axes, op](OpNode<T> &self) {
                        if (auto *g = self.input_grad(0))
                          k::global_reduce_backward(g->shape(), axes, op,
                                                    self.grad, *argmax, *g);
                      });
}

template <typename T>
Var<T> linear(const Var<T> &x, const Var<T> &w, const Var<T> &b) {
  auto out = k::linear_forward(x.value(), w.value(), value_or_empty(b));
  return record_op<T>(std::move(out), {&x, &w, b.defined() ? &b : nullptr},
                      [](OpNode<T> &self) {
                        k::linear_backward(self.input_value(0),
                                           self.input_value(1), self.grad,
                                           self.input_grad(0),
                                           self.input_grad(1),
                                           self.input_grad(2));
                      });
}

template <typename T> Var<T> reshape(Var<T> x, const Shape &shape) {
  Tensor<T> out = x.requires_grad() ? x.value() : std::move(x).take();
  out.reshape(shape);
  return record_op<T>(std::move(out), {&x}, [](OpNode<T> &self) {
    if (auto *g = self.input_grad(0))
      for (std::size_t j = 0; j < g->size(); ++j)
        (*g)[j] += self.grad[j];
  });
}

template <typename T>
Var<T> permute(const Var<T> &x, const std::vector<std::size_t> &order) {
  auto out = k::permute(x.value(), order);
  return record_op<T>(std::move(out), {&x}, [order](OpNode<T> &self) {
    auto *g = self.input_grad(0);
    if (!g)
      return;
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t i = 0; i < order.size(); ++i)
      inverse[order[i]] = i;
    const auto back = k::permute(self.grad, inverse);
    for (std::size_t j = 0; j < g->size(); ++j)
      (*g)[j] += back[j];
  });
}

template <typename T> Var<T> concat_last(const Var<T> &a, const Var<T> &b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || sa.empty() ||
      !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    throw ShapeError("concat_last: shapes " + to_string(sa) + " and " +
                     to_string(sb) + " are incompatible");
  const std::size_t da = sa.back(), db = sb.back(), rows = a.value().size() / da;
  Shape out_shape = sa;
  out_shape.back() = da + db;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.value().ptr() + r * da, da, out.ptr() + r * (da + db));
    std::copy_n(b.value().ptr() + r * db, db, out.ptr() + r * (da + db) + da);
  }
  return record_op<T>(std::move(out), {&a, &b},
                      [da, db, rows](OpNode<T> &self) {
                        const std::size_t w = da + db;
                        if (auto *g = self.input_grad(0))
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < da; ++j)
                              (*g)[r * da + j] += self.grad[r * w + j];
                        if (auto *g = self.input_grad(1))
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < db; ++j)
                              (*g)[r * db + j] += self.grad[r * w + da + j];
                      });
}

#define LASD_INSTANTIATE(T)                                                    \
  template struct BatchNormState<T>;                                           \
  template Tensor<T> batchnorm(const Tensor<T> &, BatchNormState<T> &);        \
  template Var<T> add(Var<T>, Var<T>);                                         \
  template Var<T> mul(const Var<T> &, const Var<T> &);                         \
  template Var<T> scale(const Var<T> &, T);                                    \
  template Var<T> sum(const Var<T> &);                                         \
  template Var<T> dot(const Var<T> &, const Tensor<T> &);                      \
  template Var<T> relu(Var<T>);                                                \
  template Var<T> conv2d(const Var<T> &, const ConvSpec &, const Var<T> &,     \
                         const Var<T> &);                                      \
  template Var<T> conv1d_along(const Var<T> &, std::size_t, const ConvSpec &,  \
                               const Var<T> &, const Var<T> &);                \
  template Var<T> pointwise(const Var<T> &, const Var<T> &, const Var<T> &);   \
  template Var<T> batchnorm_train(const Var<T> &, const Var<T> &,              \
                                  const Var<T> &, Tensor<T> &, Tensor<T> &, T, \
                                  T);                                          \
  template Var<T> batchnorm_infer(Var<T>, const Var<T> &, const Var<T> &,      \
                                  const Tensor<T> &, const Tensor<T> &, T);    \
  template Var<T> maxpool_along(const Var<T> &,                                \
                                const std::vector<std::size_t> &, std::size_t, \
                                std::size_t, std::size_t);                     \
  template Var<T> global_reduce(const Var<T> &,                                \
                                const std::vector<std::size_t> &, ReduceOp);   \
  template Var<T> linear(const Var<T> &, const Var<T> &, const Var<T> &);      \
  template Var<T> reshape(Var<T>, const Shape &);                              \
  template Var<T> permute(const Var<T> &, const std::vector<std::size_t> &);   \
  template Var<T> concat_last(const Var<T> &, const Var<T> &);

LASD_INSTANTIATE(float)
LASD_INSTANTIATE(double)
#undef LASD_INSTANTIATE

} // namespace lasd
