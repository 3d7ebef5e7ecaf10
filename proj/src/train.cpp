// SPDX-License-Identifier: Apache-2.0
#include <lasd/train.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

namespace lasd {

void TrainConfig::validate() const {
  if (!(lr0 >= 0) || !(lr_decay >= 0 && lr_decay < 1))
    throw Error("train config: need lr0 >= 0 and 0 <= lr_decay < 1");
  if (epochs < 1)
    throw Error("train config: epochs must be at least 1");
  if (batch < 1)
    throw Error("train config: batch must be at least 1");
  if (!(lambda >= 0))
    throw Error("train config: lambda must be non-negative");
}

double lr_at(int epoch, const TrainConfig &cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw Error("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                std::to_string(cfg.epochs) + ")");
  return cfg.lr0 * std::pow(1.0 - cfg.lr_decay, epoch);
}

void Adam::step(ParamMap<float> &params, const ParamMap<float> &grads,
                double lr) {
  for (const auto &[name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end())
      throw Error("adam: gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape())
      throw ShapeError("adam: gradient shape " + to_string(g.shape()) +
                       " does not match parameter '" + name + "'");
    for (float v : g.data())
      if (!std::isfinite(v))
        throw NonFiniteGradient("adam: non-finite gradient in '" + name +
                                "'; step rejected");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, double(t_));
  const double c2 = 1.0 - std::pow(beta2, double(t_));
  for (const auto &[name, g] : grads) {
    Tensor<float> &p = params.at(name);
    auto &st = state_[name];
    if (st.m.empty()) {
      st.m.assign(p.size(), 0.0);
      st.v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      st.m[i] = beta1 * st.m[i] + (1 - beta1) * gi;
      st.v[i] = beta2 * st.v[i] + (1 - beta2) * gi * gi;
      const double mhat = st.m[i] / c1, vhat = st.v[i] / c2;
      p[i] = float(double(p[i]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

namespace {

enum class Segment { speaking, silent, hard_negative };

constexpr std::size_t kSamplesPerFrame = kModelSampleRate / 25;

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
  }
};

/// Mouth opening in [0.15, 1] for a syllable train at `rate` Hz.
double syllable(double t_seconds, double rate, double phase) {
  const double s = std::sin(std::numbers::pi * rate * t_seconds + phase);
  return 0.15 + 0.85 * std::abs(s);
}

SyntheticSample make_sample(std::size_t frames, std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  SyntheticSample s;
  s.labels.assign(frames, 0);
  s.voiced.assign(frames, 0);
  std::vector<Segment> kind(frames);
  std::vector<double> mouth(frames), loud(frames, 0.0), pitch(frames, 0.0);
  const double rest = uniform(0.1, 0.35);

  for (std::size_t t = 0; t < frames;) {
    const std::size_t len =
      std::min<std::size_t>(frames - t, 3 + std::size_t(u(rng) * 8));
    const double pick = u(rng);
    const Segment seg = pick < 0.5    ? Segment::speaking
                        : pick < 0.75 ? Segment::silent
                                      : Segment::hard_negative;
    const double rate = uniform(3.0, 6.0), phase = uniform(0, std::numbers::pi);
    const double f0 = uniform(100.0, 240.0);
    for (std::size_t i = t; i < t + len; ++i) {
      kind[i] = seg;
      const double env = syllable(double(i) / 25.0, rate, phase);
      mouth[i] = seg == Segment::speaking ? env : rest;
      if (seg != Segment::silent) {
        loud[i] = env;
        pitch[i] = f0;
        s.voiced[i] = 1;
      }
      s.labels[i] = seg == Segment::speaking;
    }
    t += len;
  }

  // faces
  s.faces = TensorF({frames, kFaceSize, kFaceSize});
  const double bg = uniform(0.05, 0.3), skin = uniform(0.5, 0.85);
  const double cx = 56 + uniform(-4, 4), cy = 54 + uniform(-4, 4);
  const Ellipse head{cx, cy, uniform(36, 42), uniform(46, 52)};
  const Ellipse eye_l{cx - 15, cy - 14, 5, 3.5}, eye_r{cx + 15, cy - 14, 5, 3.5};
  for (std::size_t t = 0; t < frames; ++t) {
    const Ellipse lips{cx, cy + 24, 13, 1.5 + 7.5 * mouth[t]};
    float *img = s.faces.ptr() + t * kFaceSize * kFaceSize;
    for (std::size_t y = 0; y < kFaceSize; ++y)
      for (std::size_t x = 0; x < kFaceSize; ++x) {
        double v = bg;
        if (head.contains(double(x), double(y))) {
          v = skin;
          if (eye_l.contains(double(x), double(y)) ||
              eye_r.contains(double(x), double(y)) ||
              lips.contains(double(x), double(y)))
            v = 0.1;
        }
        v += 0.02 * noise(rng);
        img[y * kFaceSize + x] = float(std::clamp(v, 0.0, 1.0));
      }
  }

  // audio: per-frame loudness and pitch, linearly interpolated per sample
  AudioClip clip;
  const std::size_t n = frames * kSamplesPerFrame + 240;
  clip.samples.resize(n);
  const double floor_noise = 0.004;
  double phi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = double(i) / double(kSamplesPerFrame) - 0.5;
    const std::size_t a = std::size_t(std::clamp(pos, 0.0, double(frames - 1)));
    const std::size_t b = std::min(a + 1, frames - 1);
    const double w = std::clamp(pos - double(a), 0.0, 1.0);
    const double amp = 0.25 * ((1 - w) * loud[a] + w * loud[b]);
    const double f0 = pitch[a] > 0 ? pitch[a] : pitch[b];
    phi += 2 * std::numbers::pi * f0 / kModelSampleRate;
    double v = 0;
    if (amp > 0)
      for (int h = 1; h <= 5; ++h)
        v += std::sin(double(h) * phi) / double(h);
    clip.samples[i] = float(amp * v + floor_noise * noise(rng));
  }
  s.mfcc = align(mfcc(clip), frames);
  s.audio = std::move(clip);
  return s;
}

} // namespace

std::vector<SyntheticSample> make_synthetic(std::size_t n, std::size_t frames,
                                            std::uint64_t seed) {
  if (n < 1 || frames < 1)
    throw Error("make_synthetic: need at least one sample of one frame");
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32),
                      std::uint32_t(i)};
    std::mt19937_64 rng(seq);
    out.push_back(make_sample(frames, rng));
  }
  return out;
}

Batch make_batch(const std::vector<SyntheticSample> &corpus,
                 std::span<const std::size_t> indices) {
  if (indices.empty())
    throw Error("make_batch: empty batch");
  for (std::size_t i : indices)
    if (i >= corpus.size())
      throw Error("make_batch: index " + std::to_string(i) +
                  " outside a corpus of " + std::to_string(corpus.size()));
  const std::size_t frames = corpus.at(indices[0]).labels.size();
  const std::size_t B = indices.size(), plane = kFaceSize * kFaceSize;
  const std::size_t ta = kAudioFramesPerVideoFrame * frames;
  Batch b;
  b.faces = TensorF({1, B, frames, kFaceSize, kFaceSize});
  b.mfcc = TensorF({1, B, ta, kMfccCoefficients});
  for (std::size_t i = 0; i < B; ++i) {
    const auto &s = corpus.at(indices[i]);
    if (s.labels.size() != frames || s.mfcc.frames != ta)
      throw ShapeError("make_batch: sequences in a batch must share one length");
    std::copy(s.faces.data().begin(), s.faces.data().end(),
              b.faces.ptr() + i * frames * plane);
    for (std::size_t j = 0; j < s.mfcc.values.size(); ++j)
      b.mfcc[i * ta * kMfccCoefficients + j] = float(s.mfcc.values[j]);
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  return b;
}

StepResult compute_gradients(ModelWeights &w, const ModelConfig &cfg,
                             const Batch &batch, double tau, double lambda) {
  if (!w.count("aux.fc.weight"))
    throw Error("training needs the auxiliary head (aux.fc.*) in the weights");
  Tape<float> tape;
  ParamBinder<float> binder(w, tape);
  auto out = run_network(binder, cfg, constant(batch.faces),
                         constant(batch.mfcc), true);
  auto l_av = temperature_bce(out.logits, batch.labels, tau);
  auto l_v = temperature_bce(out.visual_logits, batch.labels, tau);
  out = {};
  StepResult r;
  r.loss.lambda = lambda;
  r.loss.loss_av = l_av.value()[0];
  r.loss.loss_v = l_v.value()[0];
  r.loss.loss_asd = r.loss.loss_av + lambda * r.loss.loss_v;
  auto total = add(l_av, scale(l_v, float(lambda)));
  tape.backward(total, false);
  for (const auto &[name, v] : binder.bound())
    r.grads.emplace(name, v.grad());
  return r;
}

std::vector<EpochStats> train(ModelWeights &w, const ModelConfig &cfg,
                              const std::vector<SyntheticSample> &corpus,
                              const TrainConfig &tc,
                              const EpochCallback &on_epoch) {
  tc.validate();
  if (corpus.empty())
    throw Error("train: empty corpus");
  check_weights(w, cfg);
  Adam adam;
  std::vector<EpochStats> trace;
  std::vector<std::size_t> order(corpus.size());
  for (int e = 0; e < tc.epochs; ++e) {
    EpochStats st;
    st.epoch = e;
    st.lr = lr_at(e, tc);
    st.tau = tc.schedule.at(e);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(tc.seed * 1000003ull + std::uint64_t(e));
    std::shuffle(order.begin(), order.end(), rng);
    double seen = 0;
    for (std::size_t b0 = 0, step = 0; b0 < order.size(); b0 += tc.batch, ++step) {
      const std::size_t nb = std::min(tc.batch, order.size() - b0);
      const auto batch =
        make_batch(corpus, std::span<const std::size_t>(order).subspan(b0, nb));
      StepResult r;
      try {
        r = compute_gradients(w, cfg, batch, st.tau, tc.lambda);
        if (!std::isfinite(r.loss.loss_asd))
          throw NonFiniteGradient("loss is not finite");
        adam.step(w, r.grads, st.lr);
      } catch (const NumericError &err) {
        throw TrainingDiverged("training diverged at epoch " +
                               std::to_string(e) + ", batch " +
                               std::to_string(step) + ": " + err.what());
      }
      st.loss_asd += r.loss.loss_asd * double(nb);
      st.loss_av += r.loss.loss_av * double(nb);
      st.loss_v += r.loss.loss_v * double(nb);
      seen += double(nb);
    }
    st.loss_asd /= seen;
    st.loss_av /= seen;
    st.loss_v /= seen;
    trace.push_back(st);
    if (on_epoch)
      on_epoch(st);
  }
  return trace;
}

void write_trace(std::ostream &out, const std::vector<EpochStats> &trace) {
  out << "epoch,lr,tau,L_asd,L_av,L_v\n";
  out.precision(9);
  for (const auto &s : trace)
    out << s.epoch << ',' << s.lr << ',' << s.tau << ',' << s.loss_asd << ','
        << s.loss_av << ',' << s.loss_v << '\n';
}

} // namespace lasd
