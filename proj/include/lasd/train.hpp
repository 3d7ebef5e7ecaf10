// SPDX-License-Identifier: Apache-2.0
/**
 * @file   train.hpp
 * @brief  Adam, the learning-rate schedule, a synthetic audio-visual corpus
 *         and the training loop.
 */
#pragma once

#include <lasd/audio.hpp>
#include <lasd/loss.hpp>
#include <lasd/model.hpp>

#include <functional>
#include <iosfwd>

namespace lasd {

struct TrainConfig {
  double lr0 = 0.001;
  double lr_decay = 0.05; // multiplicative: lr0 * (1 - lr_decay)^e
  int epochs = 30;
  double lambda = kAuxLossWeight;
  TemperatureSchedule schedule;
  std::size_t batch = 8;
  std::uint64_t seed = 0; // batch order

  void validate() const;
};

/// lr0 * (1 - lr_decay)^e; throws Error unless 0 <= e < epochs.
double lr_at(int epoch, const TrainConfig &cfg);

class NonFiniteGradient : public NumericError {
 public:
  using NumericError::NumericError;
};

/// Adam with bias correction. State is keyed by parameter name.
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  /// Updates every parameter that has an entry in `grads`. If any gradient
  /// holds a non-finite value nothing is changed and NonFiniteGradient names
  /// the offending tensor.
  void step(ParamMap<float> &params, const ParamMap<float> &grads, double lr);
  std::uint64_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> state_;
  std::uint64_t t_ = 0;
};

struct SyntheticSample {
  TensorF faces;                    // [T, 112, 112]
  AudioClip audio;                  // 640 T + 240 samples at 16 kHz
  MfccMap mfcc;                     // 4T frames
  Labels labels;                    // 1 = speaking
  std::vector<std::uint8_t> voiced; // audio carries speech at this frame
};

/// Deterministic corpus. Each sequence is cut into 3-10 frame segments:
/// speaking (mouth moves with the syllable envelope that also drives the
/// voiced audio), silent (still mouth, background noise only) or hard
/// negative (still mouth, someone else's speech on the audio track), with
/// probabilities 0.5 / 0.25 / 0.25.
std::vector<SyntheticSample> make_synthetic(std::size_t n, std::size_t frames,
                                            std::uint64_t seed);

/// Stacks samples [first, first + count) into [1, B, T, 112, 112] faces and
/// [1, B, 4T, 13] MFCC tensors plus concatenated labels.
struct Batch {
  TensorF faces, mfcc;
  Labels labels;
};
Batch make_batch(const std::vector<SyntheticSample> &corpus,
                 std::span<const std::size_t> indices);

struct EpochStats {
  int epoch = 0;
  double lr = 0, tau = 0;
  double loss_asd = 0, loss_av = 0, loss_v = 0;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct StepResult {
  LossBreakdown loss;
  ParamMap<float> grads;
};

/// One forward/backward pass with batch statistics. Updates running
/// statistics in `w` but not the parameters.
StepResult compute_gradients(ModelWeights &w, const ModelConfig &cfg,
                             const Batch &batch, double tau, double lambda);

using EpochCallback = std::function<void(const EpochStats &)>;

/// Trains `w` in place and returns the per-epoch trace.
std::vector<EpochStats> train(ModelWeights &w, const ModelConfig &cfg,
                              const std::vector<SyntheticSample> &corpus,
                              const TrainConfig &tc,
                              const EpochCallback &on_epoch = {});

/// Header line then one row per epoch: epoch,lr,tau,L_asd,L_av,L_v
void write_trace(std::ostream &out, const std::vector<EpochStats> &trace);

} // namespace lasd
