// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  Model variants: parameter manifest, initialization, cost accounting,
 *         inference and the weight container.
 *
 * Container layout, little-endian: "LASD", u32 version (1), u64 tensor
 * count, then per tensor u16 name length, name bytes, u8 dtype (0 = f32),
 * u8 rank, u64 extents, raw elements.
 */
#pragma once

#include <lasd/audio.hpp>
#include <lasd/network.hpp>

#include <filesystem>
#include <iosfwd>

namespace lasd {

using ModelWeights = ParamMap<float>;

struct ParamSpec {
  std::string name;
  Shape shape;
  bool trainable = true;     // false for batch-norm running statistics
  bool training_only = false; // the auxiliary head
};

/// Every tensor the config demands, in name order.
std::vector<ParamSpec> param_manifest(const ModelConfig &cfg);

/// Conv/linear weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// GRU tensors ~ U(-1/sqrt(H), 1/sqrt(H)), batch-norm gamma 1, beta 0,
/// running mean 0, running variance 1.
ModelWeights build(const ModelConfig &cfg, std::uint64_t seed);

/// Scalar parameters of the inference model: weights, biases and batch-norm
/// affine terms. Running statistics and the auxiliary head are excluded.
std::size_t count_params(const ModelConfig &cfg);

struct ModuleCount {
  std::string module;
  std::size_t params = 0;
  double flops = 0;
};
/// visual_encoder, audio_encoder, detector.
std::vector<ModuleCount> module_breakdown(const ModelConfig &cfg);

/// Multiply-accumulates per video frame for one candidate (convolutions,
/// GRU matrix products, FC), scaled by `candidates`.
double estimate_flops(const ModelConfig &cfg, std::size_t frames = 1,
                      std::size_t candidates = 1);

/// Throws Error naming the first missing, unexpected or misshaped tensor.
/// The auxiliary head may be absent.
void check_weights(const ModelWeights &w, const ModelConfig &cfg);

/// Infers kernel paths and detector variant from parameter names.
ModelConfig infer_config(const ModelWeights &w);

struct Prediction {
  std::vector<double> p_speaking; // length T, at temperature 1
  TensorF logits;                 // [T, 2]
};

/// faces: [T, 112, 112] in [0, 1]; mfcc: aligned to 4T frames.
Prediction forward(const ModelWeights &w, const ModelConfig &cfg,
                   const TensorF &faces, const MfccMap &mfcc);

enum class ContainerErrc {
  bad_magic,
  bad_version,
  truncated,
  duplicate_name,
  unsupported_dtype,
  shape_mismatch,
};

class ContainerError : public Error {
 public:
  ContainerError(ContainerErrc code, const std::string &what)
    : Error(what), code_(code) {}
  ContainerErrc code() const { return code_; }

 private:
  ContainerErrc code_;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void save_tensors(std::ostream &out, const ModelWeights &tensors);
ModelWeights load_tensors(std::istream &in);

void save_weights(const std::filesystem::path &path, const ModelWeights &w);
ModelWeights load_weights(const std::filesystem::path &path);
/// Loads and checks against `cfg` (shape_mismatch on any disagreement).
ModelWeights load_weights(const std::filesystem::path &path,
                          const ModelConfig &cfg);

/// Container with one tensor named "faces" of shape [T, 112, 112].
void save_faces(const std::filesystem::path &path, const TensorF &faces);
TensorF load_faces(const std::filesystem::path &path);

} // namespace lasd
