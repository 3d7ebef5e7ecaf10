// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <lasd/gradcheck.hpp>
#include <lasd/gru.hpp>
#include <lasd/model.hpp>

#include "test_util.hpp"

#include <cmath>

using namespace lasd;
using lasd::testing::probe;
using lasd::testing::random_tensor;

namespace {

GruWeights<double> zero_gru(std::size_t d, std::size_t h) {
  return {TensorD({3 * h, d}), TensorD({3 * h, h}), TensorD({3 * h}),
          TensorD({3 * h})};
}

GruWeights<double> random_gru(std::size_t d, std::size_t h, unsigned seed) {
  return {random_tensor<double>({3 * h, d}, seed),
          random_tensor<double>({3 * h, h}, seed + 1),
          random_tensor<double>({3 * h}, seed + 2),
          random_tensor<double>({3 * h}, seed + 3)};
}

ModelConfig detector_config(DetectorVariant v) {
  ModelConfig c;
  c.detector = v;
  return c;
}

TensorF logits_of(ModelWeights &w, DetectorVariant v, const TensorF &fused) {
  ParamBinder<float> p(w);
  return detect(p, detector_config(v), constant(fused)).value();
}

/// Fused features reversed along time.
TensorF reverse_time(const TensorF &x) {
  const std::size_t B = x.shape()[0], T = x.shape()[1], D = x.shape()[2];
  TensorF out(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(x.ptr() + (b * T + t) * D, D, out.ptr() + (b * T + T - 1 - t) * D);
  return out;
}

} // namespace

TEST_CASE("fuse examples") {
  auto v = constant(TensorF({1, 1, 2}, {1, 2}));
  auto a = constant(TensorF({1, 1, 2}, {3, 4}));
  CHECK(fuse(v, a).value() == TensorF({1, 1, 2}, {4, 6}));
  auto r = random_tensor<float>({2, 3, 4}, 1);
  CHECK(fuse(constant(r), constant(TensorF({2, 3, 4}))).value() == r);
  TensorF neg = r;
  for (auto &x : neg.data())
    x = -x;
  const auto zero = fuse(constant(r), constant(neg));
  for (float x : zero.value().data())
    CHECK(x == 0.0f);
  CHECK_THROWS_AS(fuse(constant(r), constant(TensorF({2, 3, 5}))), ShapeError);
}

TEST_CASE("gru_cell with zero parameters halves the state") {
  auto w = zero_gru(4, 3);
  TensorD h({3}, {0.4, -0.2, 0.8});
  auto out = gru_cell(random_tensor<double>({4}, 2), h, w);
  for (std::size_t j = 0; j < 3; ++j)
    CHECK(out[j] == doctest::Approx(0.5 * h[j]).epsilon(1e-15));
}

TEST_CASE("gru_cell update gate saturation keeps the zero state") {
  auto w = zero_gru(2, 2);
  for (std::size_t j = 2; j < 4; ++j) // b_z rows
    w.bias_ih[j] = 60.0;
  auto out = gru_cell(TensorD({2}, {0.7, -0.3}), TensorD({2}), w);
  for (double v : out.data())
    CHECK(std::abs(v) < 1e-20);
}

TEST_CASE("gru_cell scalar toy") {
  GruWeights<double> w{TensorD({3, 1}, 1.0), TensorD({3, 1}, 1.0), TensorD({3}),
                       TensorD({3})};
  auto h = gru_cell(TensorD({1}, {1.0}), TensorD({1}), w);
  // z = r = sigmoid(1), n = tanh(1), h = (1 - z) n
  const double z = 1 / (1 + std::exp(-1.0));
  CHECK(h[0] == doctest::Approx((1 - z) * std::tanh(1.0)).epsilon(1e-12));
  CHECK(h[0] == doctest::Approx(0.2048).epsilon(1e-3));
  CHECK_THROWS_AS(gru_cell(TensorD({2}), TensorD({1}), w), ShapeError);
}

TEST_CASE("gru_sequence matches repeated cells in both directions") {
  auto w = random_gru(3, 4, 10);
  auto x = random_tensor<double>({2, 5, 3}, 11);
  for (bool reverse : {false, true}) {
    auto seq = gru_sequence(constant(x), constant(w.weight_ih), constant(w.weight_hh),
                            constant(w.bias_ih), constant(w.bias_hh), reverse)
                 .value();
    for (std::size_t b = 0; b < 2; ++b) {
      TensorD h({4});
      for (std::size_t s = 0; s < 5; ++s) {
        const std::size_t t = reverse ? 4 - s : s;
        TensorD xt({3});
        std::copy_n(x.ptr() + (b * 5 + t) * 3, 3, xt.ptr());
        h = gru_cell(xt, h, w);
        for (std::size_t j = 0; j < 4; ++j)
          CHECK(seq[(b * 5 + t) * 4 + j] == doctest::Approx(h[j]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("gru hidden state stays inside (-1, 1)") {
  // pre-activations stay below ~15, where tanh is still distinguishable
  // from +-1 in double precision
  auto w = random_gru(6, 5, 20);
  auto x = random_tensor<double>({3, 40, 6}, 21);
  auto h = gru_sequence(constant(x), constant(w.weight_ih), constant(w.weight_hh),
                        constant(w.bias_ih), constant(w.bias_hh))
             .value();
  for (double v : h.data()) {
    CHECK(v > -1.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("gradients: gru_cell and gru_sequence") {
  for (unsigned trial = 0; trial < 10; ++trial) {
    const std::size_t d = 2 + trial % 3, h = 2 + trial % 4, b = 1 + trial % 2;
    auto w = random_gru(d, h, 100 + 10 * trial);
    auto x = random_tensor<double>({b, d}, 200 + trial);
    auto h0 = random_tensor<double>({b, h}, 300 + trial, -0.9, 0.9);
    auto cell = [&](const Var<double> &xv, const Var<double> &hv,
                    const GruWeights<double> &ww) {
      return gru_cell(xv, hv, constant(ww.weight_ih), constant(ww.weight_hh),
                      constant(ww.bias_ih), constant(ww.bias_hh));
    };
    CHECK(finite_diff_check(
            [&](const Var<double> &v) { return probe(cell(v, constant(h0), w), trial); },
            x) < 1e-4);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) { return probe(cell(constant(x), v, w), trial); },
            h0) < 1e-4);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(gru_cell(constant(x), constant(h0), v, constant(w.weight_hh),
                                    constant(w.bias_ih), constant(w.bias_hh)),
                           trial);
            },
            w.weight_ih) < 1e-4);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(gru_cell(constant(x), constant(h0), constant(w.weight_ih), v,
                                    constant(w.bias_ih), constant(w.bias_hh)),
                           trial);
            },
            w.weight_hh) < 1e-4);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(gru_cell(constant(x), constant(h0), constant(w.weight_ih),
                                    constant(w.weight_hh), v, constant(w.bias_hh)),
                           trial);
            },
            w.bias_ih) < 1e-4);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return probe(gru_cell(constant(x), constant(h0), constant(w.weight_ih),
                                    constant(w.weight_hh), constant(w.bias_ih), v),
                           trial);
            },
            w.bias_hh) < 1e-4);

    const bool reverse = trial % 2;
    auto xs = random_tensor<double>({b, 4, d}, 400 + trial);
    auto seq = [&](const Var<double> &xv, const Var<double> &wih, const Var<double> &whh) {
      return probe(gru_sequence(xv, wih, whh, constant(w.bias_ih), constant(w.bias_hh),
                                reverse, constant(h0)),
                   trial);
    };
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return seq(v, constant(w.weight_ih), constant(w.weight_hh));
            },
            xs) < 1e-4);
    CHECK(finite_diff_check(
            [&](const Var<double> &v) {
              return seq(constant(xs), constant(w.weight_ih), v);
            },
            w.weight_hh) < 1e-4);
  }
}

TEST_CASE("detector none with a constant classifier") {
  ModelConfig cfg = detector_config(DetectorVariant::none);
  auto w = build(cfg, 1);
  w.at("detector.fc.weight").fill(0.0f);
  w.at("detector.fc.bias") = TensorF({2}, {0.3f, -0.3f});
  auto y = logits_of(w, DetectorVariant::none, random_tensor<float>({1, 6, 128}, 2));
  REQUIRE(y.shape() == Shape{1, 6, 2});
  for (std::size_t t = 0; t < 6; ++t) {
    CHECK(y[2 * t] == doctest::Approx(0.3));
    CHECK(y[2 * t + 1] == doctest::Approx(-0.3));
  }
}

TEST_CASE("bidirectional detector on a single frame") {
  auto w = build(detector_config(DetectorVariant::bidirectional), 2);
  auto y = logits_of(w, DetectorVariant::bidirectional,
                     random_tensor<float>({1, 1, 128}, 3));
  CHECK(y.shape() == Shape{1, 1, 2});
}

TEST_CASE("bidirectional detector is time-reversal symmetric") {
  auto w = build(detector_config(DetectorVariant::bidirectional), 3);
  auto x = random_tensor<float>({2, 9, 128}, 4);
  auto y = logits_of(w, DetectorVariant::bidirectional, x);

  ModelWeights swapped = w;
  for (const char *t : {"weight_ih", "weight_hh", "bias_ih", "bias_hh"})
    std::swap(swapped.at(std::string("detector.gru_fwd.") + t),
              swapped.at(std::string("detector.gru_bwd.") + t));
  auto &fc = swapped.at("detector.fc.weight");
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 128; ++j)
      std::swap(fc[r * 256 + j], fc[r * 256 + 128 + j]);
  auto yr = logits_of(swapped, DetectorVariant::bidirectional, reverse_time(x));
  auto back = reverse_time(yr.reshaped({2, 9, 2}));
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(back[i] == doctest::Approx(y[i]).epsilon(1e-5));
}

TEST_CASE("detector dependence on other frames") {
  auto x = random_tensor<float>({1, 8, 128}, 5);
  const std::size_t j = 4;
  TensorF xp = x;
  for (std::size_t c = 0; c < 128; ++c)
    xp[j * 128 + c] += 0.5f;

  SUBCASE("bidirectional: every frame sees the perturbation") {
    auto w = build(detector_config(DetectorVariant::bidirectional), 6);
    auto a = logits_of(w, DetectorVariant::bidirectional, x);
    auto b = logits_of(w, DetectorVariant::bidirectional, xp);
    for (std::size_t i = 0; i < 8; ++i)
      CHECK(std::abs(a[2 * i] - b[2 * i]) + std::abs(a[2 * i + 1] - b[2 * i + 1]) > 0);
  }
  SUBCASE("forward: frames before j are untouched") {
    auto w = build(detector_config(DetectorVariant::forward), 7);
    auto a = logits_of(w, DetectorVariant::forward, x);
    auto b = logits_of(w, DetectorVariant::forward, xp);
    for (std::size_t i = 0; i < 8; ++i) {
      const float diff = std::abs(a[2 * i] - b[2 * i]) + std::abs(a[2 * i + 1] - b[2 * i + 1]);
      if (i < j)
        CHECK(diff == 0.0f);
      else
        CHECK(diff > 0.0f);
    }
  }
}

TEST_CASE("detector parameter totals") {
  auto params = [](DetectorVariant v) {
    return double(module_breakdown(detector_config(v))[2].params);
  };
  const double gru = 3.0 * (128 * 128 + 128 * 128 + 2 * 128);
  CHECK(params(DetectorVariant::bidirectional) == 2 * gru + 2 * 256 + 2);
  CHECK(params(DetectorVariant::forward) == gru + 2 * 128 + 2);
  CHECK(params(DetectorVariant::none) == 2 * 128 + 2);
  CHECK(params(DetectorVariant::bidirectional) == doctest::Approx(1.99e5).epsilon(0.01));
  CHECK(params(DetectorVariant::forward) == doctest::Approx(0.99e5).epsilon(0.01));
}

TEST_CASE("detector rejects weights for another variant") {
  auto w = build(detector_config(DetectorVariant::forward), 8);
  ParamBinder<float> p(w);
  CHECK_THROWS_AS(detect(p, detector_config(DetectorVariant::bidirectional),
                         constant(TensorF({1, 2, 128}))),
                  Error);
}
