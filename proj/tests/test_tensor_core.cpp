// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <lasd/gradcheck.hpp>
#include <lasd/ops.hpp>
#include <lasd/reference.hpp>

#include "test_util.hpp"

#include <cmath>
#include <random>

using namespace lasd;
using lasd::testing::max_abs;
using lasd::testing::random_tensor;
using lasd::testing::probe;
using lasd::testing::relative_diff;
using lasd::testing::random_conv_case;
using lasd::testing::separated_tensor;

TEST_CASE("tensor invariants") {
  TensorF t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(numel(t.shape()) == t.size());
  CHECK_THROWS_AS(TensorF({2, 0}), ShapeError);
  CHECK_THROWS_AS(TensorF({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.reshape({4}), ShapeError);
  t.reshape({3, 2});
  CHECK(t.extent(0) == 3);
}

TEST_CASE("conv2d examples") {
  SUBCASE("zero input gives zero output") {
    TensorF x({1, 1, 3, 3});
    auto spec = ConvSpec::same(1, 2, 3, 2);
    auto w = random_tensor<float>({2, 1, 3, 3}, 1);
    TensorF b({2}, 0.f);
    auto y = kernels::conv2d_forward(x, w, b, spec);
    CHECK(max_abs(y) == 0.f);
  }
  SUBCASE("1x1 unit kernel is the identity") {
    auto x = random_tensor<float>({1, 2, 4, 5}, 2);
    auto spec = ConvSpec::same(1, 1, 1, 2);
    TensorF w({1, 1, 1, 1}, 1.f);
    auto y = kernels::conv2d_forward(x, w, TensorF(), spec);
    CHECK(y == x);
  }
  SUBCASE("2x2 ones over [[1,2],[3,4]]") {
    TensorF x({1, 1, 2, 2}, {1, 2, 3, 4});
    ConvSpec spec{1, 1, {2, 2}, {1, 1}, {0, 0}};
    TensorF w({1, 1, 2, 2}, 1.f);
    auto oracle = reference::conv2d(x, w, TensorF(), spec);
    REQUIRE(oracle.size() == 1);
    CHECK(oracle[0] == 10.f);
    auto y = kernels::conv2d_forward(x, w, TensorF(), spec);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y[0] == 10.f);
  }
  SUBCASE("errors") {
    TensorF x({1, 1, 2, 2});
    ConvSpec spec{1, 1, {3, 3}, {1, 1}, {0, 0}};
    CHECK_THROWS_AS(kernels::conv2d_forward(x, TensorF({1, 1, 3, 3}),
                                            TensorF(), spec),
                    ShapeError);
    auto ok = ConvSpec::same(1, 1, 3, 2);
    CHECK_THROWS_AS(kernels::conv2d_forward(x, TensorF({1, 2, 3, 3}),
                                            TensorF(), ok),
                    ShapeError);
  }
}

TEST_CASE("conv1d_along examples") {
  SUBCASE("unit kernel is the identity on the axis") {
    auto x = random_tensor<float>({1, 3, 7}, 3);
    auto spec = ConvSpec::same(1, 1, 1, 1);
    TensorF w({1, 1, 1}, 1.f);
    CHECK(kernels::conv1d_forward(x, 2, w, TensorF(), spec) == x);
    CHECK(kernels::conv1d_forward(x, 1, w, TensorF(), spec) == x);
  }
  SUBCASE("[1,2,3] with [1,1,1], pad 1") {
    TensorF x({1, 3}, {1, 2, 3});
    auto spec = ConvSpec::same(1, 1, 3, 1);
    TensorF w({1, 1, 3}, 1.f);
    auto oracle = reference::conv1d(x, 1, w, TensorF({1}, 0.f), spec);
    CHECK(oracle == TensorF({1, 3}, {3, 6, 5}));
    CHECK(kernels::conv1d_forward(x, 1, w, TensorF({1}, 0.f), spec) == oracle);
  }
  SUBCASE("zero kernel leaves the bias") {
    auto x = random_tensor<float>({2, 4, 40}, 4);
    auto spec = ConvSpec::same(2, 1, 5, 1);
    TensorF w({1, 2, 5}, 0.f);
    for (std::size_t axis : {1, 2}) {
      auto y = kernels::conv1d_forward(x, axis, w, TensorF({1}, 2.5f), spec);
      for (float v : y.data())
        CHECK(v == 2.5f);
    }
  }
  SUBCASE("channel axis rejected") {
    auto x = random_tensor<float>({1, 4}, 5);
    auto spec = ConvSpec::same(1, 1, 3, 1);
    CHECK_THROWS_AS(kernels::conv1d_forward(x, 0, TensorF({1, 1, 3}),
                                            TensorF(), spec),
                    ShapeError);
    CHECK_THROWS_AS(kernels::conv1d_forward(x, 2, TensorF({1, 1, 3}),
                                            TensorF(), spec),
                    ShapeError);
  }
}

TEST_CASE("batchnorm examples") {
  SUBCASE("identity parameters in infer mode") {
    auto s = BatchNormState<float>::identity(2);
    s.eps = 0;
    auto x = random_tensor<float>({2, 5}, 6);
    auto y = batchnorm(x, s);
    CHECK(relative_diff(y, x) < 1e-6);
  }
  SUBCASE("affine evaluation") {
    auto s = BatchNormState<float>::identity(1);
    s.gamma[0] = 2;
    s.beta[0] = 1;
    s.eps = 0;
    auto y = batchnorm(TensorF({1, 1}, {3.f}), s);
    CHECK(y[0] == doctest::Approx(7.0));
  }
  SUBCASE("train mode uses batch statistics") {
    auto s = BatchNormState<double>::identity(1);
    s.mode = BnMode::train;
    s.eps = 1e-12;
    auto y = batchnorm(TensorD({1, 2}, {1.0, 3.0}), s);
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-9));
    // momentum 0.1 toward mean 2 and unbiased variance 2
    CHECK(s.running_mean[0] == doctest::Approx(0.2));
    CHECK(s.running_var[0] == doctest::Approx(0.9 + 0.2));
  }
  SUBCASE("errors") {
    auto s = BatchNormState<float>::identity(3);
    CHECK_THROWS_AS(batchnorm(TensorF({2, 4}), s), ShapeError);
    s = BatchNormState<float>::identity(1);
    s.mode = BnMode::train;
    TensorF bad({1, 2}, {1.f, std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS(batchnorm(bad, s), Error);
  }
}

TEST_CASE("relu examples") {
  auto y = relu(constant(TensorF({3}, {-1, 0, 2}))).value();
  CHECK(y == TensorF({3}, {0, 0, 2}));
  CHECK(max_abs(relu(constant(TensorF({4}, -3.f))).value()) == 0.f);
  TensorF pos({3}, {0.f, 1.f, 5.f});
  CHECK(relu(constant(pos)).value() == pos);
}

TEST_CASE("maxpool examples") {
  ArgIndex idx;
  auto y = kernels::maxpool_forward(TensorF({1, 4}, {1, 2, 3, 4}), {1}, 3, 2,
                                    1, idx);
  CHECK(y == TensorF({1, 2}, {2, 4}));
  CHECK(y == reference::maxpool1d(TensorF({1, 4}, {1, 2, 3, 4}), 1, 3, 2, 1));

  auto c = kernels::maxpool_forward(TensorF({2, 6, 6}, -0.5f), {1, 2}, 3, 2, 1,
                                    idx);
  CHECK(c.shape() == Shape{2, 3, 3});
  for (float v : c.data())
    CHECK(v == -0.5f);

  auto once = kernels::maxpool_forward(TensorF({1, 100}), {1}, 3, 2, 1, idx);
  CHECK(once.extent(1) == 50);
  auto twice = kernels::maxpool_forward(once, {1}, 3, 2, 1, idx);
  CHECK(twice.extent(1) == 25);

  CHECK_THROWS_AS(kernels::maxpool_forward(TensorF({1, 4}), {2}, 3, 2, 1, idx),
                  ShapeError);
}

TEST_CASE("maxpool argmax over two axes") {
  // brute-force window scan; ties go to the lowest W, then the lowest H
  auto check = [](const TensorF &x) {
    ArgIndex idx;
    const auto y = kernels::maxpool_forward(x, {1, 2}, 3, 2, 1, idx);
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t ho = y.extent(1), wo = y.extent(2);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          float best = -INFINITY;
          std::size_t at = 0;
          for (long dx = 0; dx < 3; ++dx)
            for (long dy = 0; dy < 3; ++dy) {
              const long iy = long(2 * oy) - 1 + dy, ix = long(2 * ox) - 1 + dx;
              if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w))
                continue;
              const std::size_t flat = (ch * h + std::size_t(iy)) * w + std::size_t(ix);
              if (x[flat] > best) {
                best = x[flat];
                at = flat;
              }
            }
          const std::size_t out = (ch * ho + oy) * wo + ox;
          CHECK(y[out] == best);
          CHECK(idx[out] == at);
        }
  };
  check(random_tensor<float>({2, 9, 7}, 31));
  TensorF coarse({3, 8, 8});
  for (std::size_t i = 0; i < coarse.size(); ++i)
    coarse[i] = float((i * 7) % 3); // many ties
  check(coarse);
  check(TensorF({1, 5, 5}, 0.0f));

  ArgIndex idx;
  CHECK_THROWS_AS(kernels::maxpool_forward(TensorF({1, 8}), {1}, 3, 2, 3, idx), Error);
}

TEST_CASE("pooling extent law holds for every length up to 256") {
  ArgIndex idx;
  for (std::size_t len = 1; len <= 256; ++len) {
    auto x = random_tensor<float>({1, len}, len);
    auto y = kernels::maxpool_forward(x, {1}, 3, 2, 1, idx);
    CHECK(y.extent(1) == (len + 2 - 3) / 2 + 1);
    CHECK(y == reference::maxpool1d(x, 1, 3, 2, 1));
    CHECK(window_output_extent(len, 3, 1, 1) == len);
  }
}

TEST_CASE("global_reduce examples") {
  ArgIndex idx;
  auto m = kernels::global_reduce_forward(TensorF({1, 2, 2}, {1, 5, 2, 3}),
                                          {1, 2}, ReduceOp::max, idx);
  CHECK(m.shape() == Shape{1});
  CHECK(m[0] == 5.f);
  auto mean = kernels::global_reduce_forward(TensorF({3}, {2, 4, 6}), {0},
                                             ReduceOp::mean, idx);
  CHECK(mean[0] == doctest::Approx(4.0));
  auto x = random_tensor<float>({3, 1, 4}, 9);
  auto same = kernels::global_reduce_forward(x, {1}, ReduceOp::max, idx);
  CHECK(same.data()[0] == x.data()[0]);
  CHECK(same.shape() == Shape{3, 4});
  CHECK_THROWS_AS(kernels::global_reduce_forward(x, {}, ReduceOp::max, idx),
                  ShapeError);
  CHECK_THROWS_AS(kernels::global_reduce_forward(x, {3}, ReduceOp::max, idx),
                  ShapeError);
}

TEST_CASE("linear examples") {
  TensorF eye({2, 2}, {1, 0, 0, 1});
  auto x = random_tensor<float>({3, 2}, 10);
  CHECK(kernels::linear_forward(x, eye, TensorF({2}, 0.f)) == x);
  auto y = kernels::linear_forward(x, TensorF({2, 2}, 0.f), TensorF({2}, {1, 2}));
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(y[r * 2] == 1.f);
    CHECK(y[r * 2 + 1] == 2.f);
  }
  auto h = kernels::linear_forward(TensorF({2}, {1, 1}),
                                   TensorF({2, 2}, {1, 2, 3, 4}), TensorF());
  CHECK(h == TensorF({2}, {3, 7}));
  CHECK_THROWS_AS(kernels::linear_forward(TensorF({3}), eye, TensorF()),
                  ShapeError);
}

TEST_CASE("backward examples") {
  Tape<double> tape;
  auto x = tape.leaf(TensorD({4}, {1, -2, 3, 0.5}));
  auto unused = tape.leaf(TensorD({2}, {7, 8}));
  auto loss = sum(x);
  tape.backward(loss);
  for (double g : x.grad().data())
    CHECK(g == 1.0);
  CHECK(max_abs(unused.grad()) == 0.0);

  Tape<double> tape2;
  auto neg = tape2.leaf(TensorD({3}, {-1, -2, -0.1}));
  tape2.backward(sum(relu(neg)));
  CHECK(max_abs(neg.grad()) == 0.0);
}

TEST_CASE("backward visits each op node once in reverse order") {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor<double>({2, 3}, 11));
  auto a = relu(x);
  auto b = scale(a, 2.0);
  auto c = add(a, b); // a is used twice
  auto loss = sum(c);
  CHECK(tape.backward(loss) == 4);
  for (std::size_t i = 0; i < x.value().size(); ++i)
    CHECK(x.grad()[i] == (x.value()[i] > 0 ? 3.0 : 0.0));
}

TEST_CASE("backward errors") {
  Tape<double> tape, other;
  auto x = tape.leaf(TensorD({3}, 1.0));
  CHECK_THROWS_AS(tape.backward(relu(x)), Error);
  auto y = other.leaf(TensorD({1}, 1.0));
  CHECK_THROWS_AS(tape.backward(sum(y)), Error);
  CHECK_THROWS_AS(tape.backward(constant(TensorD({1}, 1.0))), Error);
  CHECK_THROWS_AS(add(x, other.leaf(TensorD({3}, 1.0))), Error);
}

TEST_CASE("finite_diff_check examples") {
  ScalarFunction squares = [](const Var<double> &x) { return sum(mul(x, x)); };
  auto r = finite_diff_report(squares, TensorD({2}, {1, 2}));
  CHECK(r.analytic == TensorD({2}, {2, 4}));
  CHECK(r.max_relative_error < 1e-8);

  TensorD weights({3}, {0.5, -2, 3});
  ScalarFunction lin = [&](const Var<double> &x) { return dot(x, weights); };
  for (double step : {1e-2, 1e-5, 1e-1})
    CHECK(finite_diff_check(lin, TensorD({3}, {1, 2, 3}), step) < 1e-9);

  ScalarFunction flat = [](const Var<double> &) {
    return constant(TensorD({1}, 4.0));
  };
  auto rc = finite_diff_report(flat, TensorD({2}, {1, 2}));
  CHECK(max_abs(rc.analytic) == 0.0);
  CHECK(rc.max_relative_error == 0.0);

  ScalarFunction blowup = [](const Var<double> &x) {
    return scale(sum(x), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(finite_diff_check(blowup, TensorD({1}, 1.0)), Error);
}

TEST_CASE("optimized convolutions match the nested-loop reference") {
  std::mt19937 rng(1234);
  for (int trial = 0; trial < 100; ++trial) {
    const bool two_d = trial % 2 == 0;
    auto c = random_conv_case(rng, two_d);
    CAPTURE(to_string(c.x));
    auto x = random_tensor<float>(c.x, 100 + trial);
    Shape wshape{c.spec.out_channels, c.spec.in_channels};
    for (auto k : c.spec.kernel)
      wshape.push_back(k);
    auto w = random_tensor<float>(wshape, 200 + trial);
    auto b = random_tensor<float>({c.spec.out_channels}, 300 + trial);
    TensorF fast, slow;
    if (two_d) {
      fast = kernels::conv2d_forward(x, w, b, c.spec);
      slow = reference::conv2d(x, w, b, c.spec);
    } else {
      fast = kernels::conv1d_forward(x, c.axis, w, b, c.spec);
      slow = reference::conv1d(x, c.axis, w, b, c.spec);
    }
    REQUIRE(fast.shape() == slow.shape());
    CHECK(relative_diff(fast, slow) < 1e-6);
  }
}

TEST_CASE("convolution is linear in its input") {
  std::mt19937 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = random_conv_case(rng, trial % 2 == 0);
    auto x = random_tensor<float>(c.x, 400 + trial);
    auto y = random_tensor<float>(c.x, 500 + trial);
    Shape wshape{c.spec.out_channels, c.spec.in_channels};
    for (auto k : c.spec.kernel)
      wshape.push_back(k);
    auto w = random_tensor<float>(wshape, 600 + trial);
    const float a = 0.7f, bcoef = -1.3f;
    TensorF mix(c.x);
    for (std::size_t i = 0; i < mix.size(); ++i)
      mix[i] = a * x[i] + bcoef * y[i];
    auto conv = [&](const TensorF &in) {
      return trial % 2 == 0
               ? kernels::conv2d_forward(in, w, TensorF(), c.spec)
               : kernels::conv1d_forward(in, c.axis, w, TensorF(), c.spec);
    };
    auto lhs = conv(mix);
    auto cx = conv(x), cy = conv(y);
    TensorF rhs(lhs.shape());
    for (std::size_t i = 0; i < rhs.size(); ++i)
      rhs[i] = a * cx[i] + bcoef * cy[i];
    CHECK(relative_diff(lhs, rhs) < 1e-5);
  }
}

TEST_CASE("forward ops are deterministic") {
  auto x = random_tensor<float>({3, 2, 9, 9}, 21);
  auto w = random_tensor<float>({4, 3, 3, 3}, 22);
  auto spec = ConvSpec::same(3, 4, 3, 2, 2);
  auto a = kernels::conv2d_forward(x, w, TensorF(), spec);
  auto b = kernels::conv2d_forward(x, w, TensorF(), spec);
  CHECK(a == b);
}

// --- gradient suite -------------------------------------------------------

namespace {

constexpr double kGradTol = 1e-4;

} // namespace

TEST_CASE("gradients: conv2d") {
  std::mt19937 rng(31);
  for (unsigned trial = 0; trial < 10; ++trial) {
    auto c = random_conv_case(rng, true);
    Shape wshape{c.spec.out_channels, c.spec.in_channels, c.spec.kernel[0],
                 c.spec.kernel[1]};
    auto x = random_tensor<double>(c.x, trial);
    auto w = random_tensor<double>(wshape, trial + 50);
    auto b = random_tensor<double>({c.spec.out_channels}, trial + 90);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(conv2d(v, c.spec, constant(w), constant(b)), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(conv2d(constant(x), c.spec, v, constant(b)), trial);
            },
            w) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(conv2d(constant(x), c.spec, constant(w), v), trial);
            },
            b) < kGradTol);
  }
}

TEST_CASE("gradients: conv1d_along") {
  std::mt19937 rng(32);
  for (unsigned trial = 0; trial < 12; ++trial) {
    auto c = random_conv_case(rng, false);
    if (trial % 3 == 0) {
      // force the shifted-GEMM layout
      c.spec.stride = {1};
      c.x = {c.spec.in_channels, 2, c.spec.kernel[0] + 3, 17};
      c.axis = 2;
    }
    CAPTURE(to_string(c.x));
    Shape wshape{c.spec.out_channels, c.spec.in_channels, c.spec.kernel[0]};
    auto x = random_tensor<double>(c.x, trial);
    auto w = random_tensor<double>(wshape, trial + 50);
    auto b = random_tensor<double>({c.spec.out_channels}, trial + 90);
    const auto axis = c.axis;
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(
                conv1d_along(v, axis, c.spec, constant(w), constant(b)), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(
                conv1d_along(constant(x), axis, c.spec, v, constant(b)), trial);
            },
            w) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(
                conv1d_along(constant(x), axis, c.spec, constant(w), v), trial);
            },
            b) < kGradTol);
  }
}

TEST_CASE("gradients: pointwise") {
  for (unsigned trial = 0; trial < 10; ++trial) {
    const std::size_t ci = 1 + trial % 4, co = 2 + trial % 3;
    auto x = random_tensor<double>({ci, 3, 5}, trial);
    auto w = random_tensor<double>({co, ci}, trial + 7);
    auto b = random_tensor<double>({co}, trial + 9);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(pointwise(v, constant(w), constant(b)), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(pointwise(constant(x), v, constant(b)), trial);
            },
            w) < kGradTol);
  }
}

TEST_CASE("gradients: batchnorm in train mode") {
  for (unsigned trial = 0; trial < 10; ++trial) {
    const std::size_t c = 1 + trial % 3;
    auto x = random_tensor<double>({c, 2 + trial % 3, 4}, trial);
    auto gamma = random_tensor<double>({c}, trial + 3);
    auto beta = random_tensor<double>({c}, trial + 4);
    TensorD rm({c}, 0.0), rv({c}, 1.0);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(
                batchnorm_train(v, constant(gamma), constant(beta), rm, rv),
                trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(batchnorm_train(constant(x), v, constant(beta), rm,
                                           rv),
                           trial);
            },
            gamma) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(batchnorm_train(constant(x), constant(gamma), v, rm,
                                           rv),
                           trial);
            },
            beta) < kGradTol);
  }
}

TEST_CASE("gradients: batchnorm in infer mode") {
  for (unsigned trial = 0; trial < 10; ++trial) {
    const std::size_t c = 2;
    auto x = random_tensor<double>({c, 6}, trial);
    auto gamma = random_tensor<double>({c}, trial + 3);
    auto beta = random_tensor<double>({c}, trial + 4);
    TensorD rm({c}, {0.1, -0.3}), rv({c}, {0.5, 2.0});
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(
                batchnorm_infer(v, constant(gamma), constant(beta), rm, rv),
                trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(
                batchnorm_infer(constant(x), v, constant(beta), rm, rv), trial);
            },
            gamma) < kGradTol);
  }
}

TEST_CASE("gradients: linear") {
  for (unsigned trial = 0; trial < 10; ++trial) {
    const std::size_t din = 2 + trial % 4, dout = 1 + trial % 3;
    auto x = random_tensor<double>({3, 2, din}, trial);
    auto w = random_tensor<double>({dout, din}, trial + 1);
    auto b = random_tensor<double>({dout}, trial + 2);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(linear(v, constant(w), constant(b)), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(linear(constant(x), v, constant(b)), trial);
            },
            w) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(linear(constant(x), constant(w), v), trial);
            },
            b) < kGradTol);
  }
}

TEST_CASE("gradients: pooling, reductions, relu, reshaping ops") {
  for (unsigned trial = 0; trial < 10; ++trial) {
    auto x = separated_tensor({2, 3, 7, 6}, trial);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(maxpool_along(v, {2, 3}), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(maxpool_along(v, {2}), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(global_reduce(v, {2, 3}, ReduceOp::max), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(global_reduce(v, {1, 3}, ReduceOp::mean), trial);
            },
            x) < kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) { return probe(relu(v), trial); }, x) <
          kGradTol);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(permute(v, {2, 0, 3, 1}), trial);
            },
            x) < kGradTol);
    auto other = random_tensor<double>({2, 3, 7, 2}, trial + 5);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(concat_last(v, constant(other)), trial);
            },
            x) < kGradTol);
  }
}

TEST_CASE("gradients: a composite of the module's ops") {
  auto spec2 = ConvSpec::same(1, 3, 3, 2, 2);
  auto spec1 = ConvSpec::same(3, 3, 3, 1);
  auto w2 = random_tensor<double>({3, 1, 3, 3}, 1);
  auto w1 = random_tensor<double>({3, 3, 3}, 2);
  auto pw = random_tensor<double>({4, 3}, 3);
  auto fc = random_tensor<double>({2, 4}, 4);
  TensorD gamma({3}, 1.0), beta({3}, 0.0);
  for (unsigned trial = 0; trial < 10; ++trial) {
    auto x = random_tensor<double>({1, 2, 3, 8, 8}, 40 + trial);
    auto f = [&](const Var<double> &v) {
      TensorD rm({3}, 0.0), rv({3}, 1.0);
      auto h = conv2d(v, spec2, constant(w2), Var<double>());
      h = batchnorm_train(h, constant(gamma), constant(beta), rm, rv);
      h = relu(h);
      h = conv1d_along(h, 2, spec1, constant(w1), Var<double>());
      h = maxpool_along(h, {3, 4});
      h = pointwise(h, constant(pw), Var<double>());
      h = global_reduce(h, {3, 4}, ReduceOp::mean);
      h = permute(h, {1, 2, 0});
      return probe(linear(h, constant(fc), Var<double>()), trial);
    };
    CHECK(finite_diff_check(f, x) < kGradTol);
  }
}
