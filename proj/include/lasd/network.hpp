// SPDX-License-Identifier: Apache-2.0
/**
 * @file   network.hpp
 * @brief  Visual encoder, audio encoder and detector over named parameters.
 *
 * Layouts (channel-first):
 *   faces  [1, B, T, 112, 112]  ->  visual features [B, T, 128]
 *   mfcc   [1, B, 4T, 13]       ->  audio features  [B, T, 128]
 *   fused  [B, T, 128]          ->  logits          [B, T, 2] as
 *                                   (r_speaking, r_no_speaking)
 */
#pragma once

#include <lasd/ops.hpp>

#include <map>
#include <string>
#include <vector>

namespace lasd {

inline constexpr std::size_t kFaceSize = 112;
inline constexpr std::size_t kFeatureDim = 128;
inline constexpr std::size_t kGruHidden = 128;
inline constexpr std::size_t kBlockChannels[3] = {32, 64, 128};

enum class DetectorVariant { none, forward, bidirectional };

std::string to_string(DetectorVariant v);
/// Accepts none, forward/fwd, bidirectional/bi.
DetectorVariant parse_detector_variant(const std::string &s);

struct ModelConfig {
  std::vector<std::size_t> kernel_paths = {3, 5};
  DetectorVariant detector = DetectorVariant::bidirectional;
  bool include_aux_head = true;

  /// Throws Error on an empty, duplicated or unsupported kernel set.
  void validate() const;
};

template <typename T> using ParamMap = std::map<std::string, Tensor<T>>;

/// Hands out parameters as Vars. Without a tape every parameter is a
/// constant and batch norm uses running statistics; with a tape parameters
/// become grad-requiring leaves and batch norm uses batch statistics,
/// updating the running buffers in place.
template <typename T> class ParamBinder {
 public:
  explicit ParamBinder(const ParamMap<T> &params);
  ParamBinder(ParamMap<T> &params, Tape<T> &tape);

  Var<T> operator()(const std::string &name);
  BnMode bn_mode() const { return mode_; }
  void set_bn_mode(BnMode mode);

  /// Leaves created so far, by name.
  const std::map<std::string, Var<T>> &bound() const { return bound_; }

  Var<T> batchnorm(Var<T> x, const std::string &prefix);

 private:
  const Tensor<T> &find(const std::string &name) const;

  const ParamMap<T> *params_;
  ParamMap<T> *mutable_params_ = nullptr;
  Tape<T> *tape_ = nullptr;
  BnMode mode_ = BnMode::infer;
  std::map<std::string, Var<T>> bound_;
};

/// One dual-path block. `axes` picks the per-path convolution pair:
/// visual blocks run a k x k spatial conv over the last two axes, then a
/// temporal conv along axis 2; audio blocks run a conv along the MFCC axis
/// (3), then along time (2). Paths are summed and mixed by a 1x1 conv.
enum class BlockKind { visual, audio };

template <typename T>
Var<T> encoder_block(ParamBinder<T> &p, const std::string &prefix, Var<T> x,
                     BlockKind kind, std::size_t out_channels,
                     const std::vector<std::size_t> &kernel_paths,
                     std::size_t spatial_stride = 1);

template <typename T>
Var<T> visual_encode(ParamBinder<T> &p, const ModelConfig &cfg, Var<T> faces);
template <typename T>
Var<T> audio_encode(ParamBinder<T> &p, const ModelConfig &cfg, Var<T> mfcc);

/// Elementwise sum of equally shaped features.
template <typename T> Var<T> fuse(Var<T> visual, Var<T> audio);

template <typename T>
Var<T> detect(ParamBinder<T> &p, const ModelConfig &cfg, const Var<T> &fused);

/// Training-only visual classifier, [B, T, 128] -> [B, T, 2].
template <typename T>
Var<T> aux_logits(ParamBinder<T> &p, const Var<T> &visual);

template <typename T> struct NetworkOutput {
  Var<T> logits;        // [B, T, 2]
  Var<T> visual_logits; // undefined unless requested
};

template <typename T>
NetworkOutput<T> run_network(ParamBinder<T> &p, const ModelConfig &cfg,
                             Var<T> faces, Var<T> mfcc, bool with_aux = false);

} // namespace lasd
