// SPDX-License-Identifier: Apache-2.0
#include <lasd/audio.hpp>

#include <fftw3.h>

#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>

namespace lasd {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

// FFTW planning is not thread-safe; execution on a private plan is.
std::mutex &fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_ = static_cast<double *>(fftw_malloc(sizeof(double) * n));
    out_ = static_cast<fftw_complex *>(
      fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(int(n), in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft &) = delete;
  RealFft &operator=(const RealFft &) = delete;

  double *input() { return in_; }

  /// |X_k|^2 / n for k in [0, n/2].
  void power(std::vector<double> &dst) {
    fftw_execute(plan_);
    dst.resize(n_ / 2 + 1);
    for (std::size_t k = 0; k <= n_ / 2; ++k)
      dst[k] = (out_[k][0] * out_[k][0] + out_[k][1] * out_[k][1]) / double(n_);
  }

 private:
  std::size_t n_;
  double *in_ = nullptr;
  fftw_complex *out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

} // namespace

std::vector<double> dct2_matrix(std::size_t n) {
  std::vector<double> m(n * n);
  for (std::size_t k = 0; k < n; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (std::size_t i = 0; i < n; ++i)
      m[k * n + i] =
        scale * std::cos(std::numbers::pi * double(k) * (2.0 * i + 1) / (2.0 * n));
  }
  return m;
}

std::vector<double> mel_filterbank(const MfccConfig &cfg,
                                   std::uint32_t sample_rate) {
  const std::size_t bins = cfg.fft_size / 2 + 1;
  const double lo = hz_to_mel(cfg.low_hz), hi = hz_to_mel(cfg.high_hz);
  std::vector<std::size_t> edge(cfg.filters + 2);
  for (std::size_t i = 0; i < edge.size(); ++i) {
    const double mel = lo + (hi - lo) * double(i) / double(cfg.filters + 1);
    edge[i] = std::size_t(std::floor(double(cfg.fft_size + 1) *
                                     mel_to_hz(mel) / double(sample_rate)));
  }
  std::vector<double> fb(cfg.filters * bins, 0.0);
  for (std::size_t j = 0; j < cfg.filters; ++j) {
    const std::size_t a = edge[j], b = edge[j + 1], c = edge[j + 2];
    for (std::size_t k = a; k < b && k < bins; ++k)
      fb[j * bins + k] = double(k - a) / double(b - a);
    for (std::size_t k = b; k < c && k < bins; ++k)
      fb[j * bins + k] = double(c - k) / double(c - b);
  }
  return fb;
}

std::size_t mfcc_frame_count(std::size_t samples, const MfccConfig &cfg) {
  if (samples < cfg.frame_length)
    return 0;
  return (samples - cfg.frame_length) / cfg.hop + 1;
}

MfccMap mfcc(const AudioClip &clip, const MfccConfig &cfg) {
  if (clip.sample_rate != kModelSampleRate)
    throw AudioError("mfcc: sample rate " + std::to_string(clip.sample_rate) +
                     " Hz is not supported (expected 16000 Hz)");
  const std::size_t n = clip.samples.size();
  if (n < cfg.frame_length)
    throw AudioError("mfcc: clip of " + std::to_string(n) +
                     " samples is shorter than one analysis window (" +
                     std::to_string(cfg.frame_length) + ")");

  std::vector<double> emph(n);
  emph[0] = clip.samples[0];
  for (std::size_t i = 1; i < n; ++i)
    emph[i] = double(clip.samples[i]) - cfg.preemphasis * clip.samples[i - 1];

  std::vector<double> window(cfg.frame_length);
  for (std::size_t i = 0; i < window.size(); ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * double(i) /
                                       double(cfg.frame_length - 1));

  const auto fb = mel_filterbank(cfg, clip.sample_rate);
  const auto dct = dct2_matrix(cfg.filters);
  const std::size_t bins = cfg.fft_size / 2 + 1;
  std::vector<double> lifter(kMfccCoefficients);
  for (std::size_t c = 0; c < kMfccCoefficients; ++c)
    lifter[c] = 1.0 + double(cfg.lifter) / 2.0 *
                        std::sin(std::numbers::pi * double(c) / double(cfg.lifter));

  MfccMap out;
  out.frames = mfcc_frame_count(n, cfg);
  out.values.resize(out.frames * kMfccCoefficients);

  RealFft fft(cfg.fft_size);
  std::vector<double> power, log_energy(cfg.filters);
  for (std::size_t t = 0; t < out.frames; ++t) {
    double *in = fft.input();
    const double *src = emph.data() + t * cfg.hop;
    for (std::size_t i = 0; i < cfg.fft_size; ++i)
      in[i] = i < cfg.frame_length ? src[i] * window[i] : 0.0;
    fft.power(power);
    for (std::size_t j = 0; j < cfg.filters; ++j) {
      double e = 0;
      for (std::size_t k = 0; k < bins; ++k)
        e += fb[j * bins + k] * power[k];
      log_energy[j] = std::log(std::max(e, cfg.log_floor));
    }
    for (std::size_t c = 0; c < kMfccCoefficients; ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < cfg.filters; ++j)
        acc += dct[c * cfg.filters + j] * log_energy[j];
      out.values[t * kMfccCoefficients + c] = acc * lifter[c];
    }
  }
  return out;
}

MfccMap align(const MfccMap &m, std::size_t video_frames) {
  if (video_frames < 1)
    throw AudioError("align: video frame count must be at least 1");
  MfccMap out;
  out.frames = kAudioFramesPerVideoFrame * video_frames;
  out.values.assign(out.frames * kMfccCoefficients, 0.0);
  const std::size_t keep = std::min(out.frames, m.frames) * kMfccCoefficients;
  std::copy_n(m.values.begin(), keep, out.values.begin());
  return out;
}

TensorF MfccMap::to_tensor() const {
  TensorF t({1, 1, frames, kMfccCoefficients});
  for (std::size_t i = 0; i < values.size(); ++i)
    t[i] = float(values[i]);
  return t;
}

} // namespace lasd
