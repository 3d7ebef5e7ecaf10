// SPDX-License-Identifier: Apache-2.0
/**
 * @file   audio.hpp
 * @brief  PCM WAV ingestion and the 13-coefficient MFCC front end.
 *
 * MFCC framing: pre-emphasis 0.97, 400-sample (25 ms) Hamming window with a
 * 160-sample (10 ms) hop, 512-point power spectrum, 26 triangular mel filters
 * spanning 0-8000 Hz, natural log floored at 1e-30, orthonormal DCT-II keeping
 * coefficients 0-12, sinusoidal lifter of 22. At 16 kHz this yields 100 frames
 * per second, four per 25 fps video frame.
 */
#pragma once

#include <lasd/tensor.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace lasd {

inline constexpr std::uint32_t kModelSampleRate = 16000;
inline constexpr std::size_t kMfccCoefficients = 13;
inline constexpr std::size_t kAudioFramesPerVideoFrame = 4;

struct AudioClip {
  std::vector<float> samples; // in [-1, 1)
  std::uint32_t sample_rate = kModelSampleRate;
};

enum class WavErrc {
  malformed_header,
  unsupported_format,
  unsupported_bit_depth,
  unsupported_channels,
  truncated_data,
};

class WavError : public Error {
 public:
  WavError(WavErrc code, std::size_t offset, const std::string &what);
  WavErrc code() const { return code_; }
  /// Byte offset in the input where the problem was detected.
  std::size_t offset() const { return offset_; }

 private:
  WavErrc code_;
  std::size_t offset_;
};

/// RIFF/WAVE, PCM format code 1, 16-bit, mono. Samples scale by 1/32768.
AudioClip parse_wav(std::span<const std::uint8_t> bytes);
AudioClip read_wav(const std::filesystem::path &path);

/// 16-bit PCM mono encoding; samples are clamped to [-1, 1].
std::vector<std::uint8_t> encode_wav(const AudioClip &clip);
void write_wav(const std::filesystem::path &path, const AudioClip &clip);

struct MfccConfig {
  std::size_t frame_length = 400;
  std::size_t hop = 160;
  std::size_t fft_size = 512;
  std::size_t filters = 26;
  double low_hz = 0;
  double high_hz = 8000;
  double preemphasis = 0.97;
  double log_floor = 1e-30;
  std::size_t lifter = 22;
};

/// T_a x 13 cepstral matrix, row-major, 100 frames per second.
struct MfccMap {
  std::size_t frames = 0;
  std::vector<double> values;

  double at(std::size_t t, std::size_t c) const {
    return values[t * kMfccCoefficients + c];
  }
  /// [1, 1, T_a, 13] single-precision model input.
  TensorF to_tensor() const;
};

class AudioError : public Error {
 public:
  using Error::Error;
};

/// floor((samples - frame_length) / hop) + 1
std::size_t mfcc_frame_count(std::size_t samples, const MfccConfig &cfg = {});

MfccMap mfcc(const AudioClip &clip, const MfccConfig &cfg = {});

/// Crops or zero-pads trailing frames to exactly 4 * video_frames rows.
MfccMap align(const MfccMap &m, std::size_t video_frames);

/// Orthonormal n x n DCT-II matrix, row-major.
std::vector<double> dct2_matrix(std::size_t n);

/// [filters, fft_size/2 + 1] triangular mel weights, row-major.
std::vector<double> mel_filterbank(const MfccConfig &cfg,
                                   std::uint32_t sample_rate);

} // namespace lasd
