// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <lasd/model.hpp>

#include "test_util.hpp"

#include <cmath>

using namespace lasd;
using lasd::testing::random_tensor;

namespace {

ModelConfig config(std::vector<std::size_t> paths) {
  ModelConfig c;
  c.kernel_paths = std::move(paths);
  return c;
}

} // namespace

TEST_CASE("audio block preserves extents") {
  auto cfg = config({3, 5});
  auto w = build(cfg, 1);
  ParamBinder<float> p(w);
  auto y = encoder_block(p, "audio.block1",
                         constant(random_tensor<float>({1, 1, 100, 13}, 2)),
                         BlockKind::audio, 32, cfg.kernel_paths);
  CHECK(y.shape() == Shape{32, 1, 100, 13});
}

TEST_CASE("audio block: zero input gives bias-driven constant channels") {
  // The MFCC axis is constant everywhere. Along time, zero padding moves
  // the first and last (k - 1) / 2 frames; frames beyond that match.
  auto cfg = config({3, 5});
  auto w = build(cfg, 4);
  ParamBinder<float> p(w);
  auto y = encoder_block(p, "audio.block1", constant(TensorF({1, 1, 20, 13})),
                         BlockKind::audio, 32, cfg.kernel_paths)
             .value();
  float along_mfcc = 0, interior = 0;
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t t = 0; t < 20; ++t)
      for (std::size_t m = 0; m < 13; ++m) {
        const float v = y[(c * 20 + t) * 13 + m];
        along_mfcc = std::max(along_mfcc, std::abs(v - y[(c * 20 + t) * 13]));
        if (t >= 2 && t < 18)
          interior = std::max(interior, std::abs(v - y[(c * 20 + 2) * 13]));
      }
  CHECK(along_mfcc < 1e-6f);
  CHECK(interior < 1e-6f);
}

TEST_CASE("audio block: single-path convolution parameter count") {
  const std::size_t ci = 1, co = 32;
  std::size_t conv_weights = 0;
  for (const auto &s : param_manifest(config({3})))
    if (s.name.starts_with("audio.block1.") && s.name.ends_with(".weight"))
      conv_weights += numel(s.shape);
  CHECK(conv_weights == ci * co * 3 + co * co * 3 + co * co);
}

TEST_CASE("audio encoder parameter totals") {
  auto closed_form = [](std::vector<std::size_t> paths) {
    std::size_t total = 0, ci = 1;
    for (std::size_t co : {32u, 64u, 128u}) {
      for (std::size_t k : paths)
        total += (ci * co * k + 3 * co) + (co * co * k + 3 * co);
      total += co * co + 3 * co;
      ci = co;
    }
    return total;
  };
  for (auto paths : {std::vector<std::size_t>{3, 5}, {3}, {5}, {7}})
    CHECK(module_breakdown(config(paths))[1].params == closed_form(paths));
  // the rounded figure, at the tolerance used for the whole-model totals
  CHECK(double(module_breakdown(config({3, 5}))[1].params) ==
        doctest::Approx(2.6e5).epsilon(0.08));
  CHECK(double(module_breakdown(config({3}))[1].params) ==
        doctest::Approx(1.2e5).epsilon(0.05));
}

TEST_CASE("audio encoder output rows follow the video frame count") {
  auto cfg = config({3, 5});
  auto w = build(cfg, 2);
  ParamBinder<float> p(w);
  auto f = audio_encode(p, cfg, constant(random_tensor<float>({1, 1, 100, 13}, 5)));
  CHECK(f.shape() == Shape{1, 25, 128});
  auto one = audio_encode(p, cfg, constant(random_tensor<float>({1, 1, 4, 13}, 6)));
  CHECK(one.shape() == Shape{1, 1, 128});
  CHECK_THROWS_AS(audio_encode(p, cfg, constant(TensorF({1, 1, 8, 12}))), ShapeError);
}

TEST_CASE("audio encoder: zero input gives identical interior rows") {
  // Zero padding reaches output rows 0..4 (and the mirror at the end):
  // kernel 5 spreads it 2 rows per block, each pool halves the distance.
  auto cfg = config({3, 5});
  auto w = build(cfg, 7);
  ParamBinder<float> p(w);
  const std::size_t frames = 16;
  auto f = audio_encode(p, cfg, constant(TensorF({1, 1, 4 * frames, 13}))).value();
  float gap = 0;
  for (std::size_t t = 5; t + 5 < frames; ++t)
    for (std::size_t c = 0; c < 128; ++c)
      gap = std::max(gap, std::abs(f[t * 128 + c] - f[5 * 128 + c]));
  CHECK(gap < 1e-5f);
}

TEST_CASE("audio encoder: output length equals T_v for T_v in [1, 512]") {
  auto cfg = config({3});
  auto w = build(cfg, 3);
  ParamBinder<float> p(w);
  std::size_t failures = 0;
  for (std::size_t tv = 1; tv <= 512; ++tv) {
    // the pooling extent law alone: two max-pools (3, 2, 1) over 4 T_v
    const std::size_t once = window_output_extent(4 * tv, 3, 2, 1);
    failures += window_output_extent(once, 3, 2, 1) != tv;
  }
  CHECK(failures == 0);
  for (std::size_t tv : {1u, 2u, 3u, 7u, 31u, 64u, 129u})
    CHECK(audio_encode(p, cfg, constant(TensorF({1, 1, 4 * tv, 13}))).shape()[1] == tv);
}
