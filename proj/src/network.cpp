// SPDX-License-Identifier: Apache-2.0
#include <lasd/gru.hpp>
#include <lasd/network.hpp>

#include <algorithm>
#include <set>

namespace lasd {

std::string to_string(DetectorVariant v) {
  switch (v) {
  case DetectorVariant::none:
    return "none";
  case DetectorVariant::forward:
    return "forward";
  case DetectorVariant::bidirectional:
    return "bidirectional";
  }
  return "?";
}

DetectorVariant parse_detector_variant(const std::string &s) {
  if (s == "none")
    return DetectorVariant::none;
  if (s == "forward" || s == "fwd")
    return DetectorVariant::forward;
  if (s == "bidirectional" || s == "bi")
    return DetectorVariant::bidirectional;
  throw Error("unknown detector variant '" + s +
              "' (expected none, forward or bi)");
}

void ModelConfig::validate() const {
  if (kernel_paths.empty())
    throw Error("model config: at least one kernel path is required");
  std::set<std::size_t> seen;
  for (std::size_t k : kernel_paths) {
    if (k != 3 && k != 5 && k != 7)
      throw Error("model config: kernel path " + std::to_string(k) +
                  " is not one of 3, 5, 7");
    if (!seen.insert(k).second)
      throw Error("model config: kernel path " + std::to_string(k) +
                  " listed twice");
  }
}

template <typename T>
ParamBinder<T>::ParamBinder(const ParamMap<T> &params) : params_(&params) {}

template <typename T>
ParamBinder<T>::ParamBinder(ParamMap<T> &params, Tape<T> &tape)
  : params_(&params), mutable_params_(&params), tape_(&tape),
    mode_(BnMode::train) {}

template <typename T> void ParamBinder<T>::set_bn_mode(BnMode mode) {
  if (mode == BnMode::train && !mutable_params_)
    throw Error("batch-norm train mode needs writable running statistics");
  mode_ = mode;
}

template <typename T>
const Tensor<T> &ParamBinder<T>::find(const std::string &name) const {
  auto it = params_->find(name);
  if (it == params_->end())
    throw Error("missing parameter '" + name + "'");
  return it->second;
}

template <typename T> Var<T> ParamBinder<T>::operator()(const std::string &name) {
  if (auto it = bound_.find(name); it != bound_.end())
    return it->second;
  Var<T> v = tape_ ? tape_->leaf(find(name)) : constant(find(name));
  bound_.emplace(name, v);
  return v;
}

template <typename T>
Var<T> ParamBinder<T>::batchnorm(Var<T> x, const std::string &prefix) {
  auto gamma = (*this)(prefix + ".gamma");
  auto beta = (*this)(prefix + ".beta");
  if (mode_ == BnMode::train)
    return lasd::batchnorm_train(x, gamma, beta,
                                 mutable_params_->at(prefix + ".running_mean"),
                                 mutable_params_->at(prefix + ".running_var"));
  return lasd::batchnorm_infer(std::move(x), gamma, beta,
                               find(prefix + ".running_mean"),
                               find(prefix + ".running_var"));
}

namespace {

template <typename T>
Var<T> conv_bn_relu(ParamBinder<T> &p, const std::string &name, Var<T> y) {
  return relu(p.batchnorm(std::move(y), name + "_bn"));
}

} // namespace

template <typename T>
Var<T> encoder_block(ParamBinder<T> &p, const std::string &prefix, Var<T> x,
                     BlockKind kind, std::size_t co,
                     const std::vector<std::size_t> &kernel_paths,
                     std::size_t spatial_stride) {
  const std::size_t rank = kind == BlockKind::visual ? 5 : 4;
  if (x.shape().size() != rank)
    throw ShapeError(prefix + ": expected rank " + std::to_string(rank) +
                     " input, got " + to_string(x.shape()));
  const std::size_t ci = x.shape()[0];
  Var<T> sum_paths;
  for (std::size_t k : kernel_paths) {
    const std::string path = prefix + ".path" + std::to_string(k);
    Var<T> y;
    if (kind == BlockKind::visual) {
      y = conv2d(x, ConvSpec::same(ci, co, k, 2, spatial_stride),
                 p(path + ".spatial.weight"), p(path + ".spatial.bias"));
      y = conv_bn_relu(p, path + ".spatial", std::move(y));
    } else {
      y = conv1d_along(x, 3, ConvSpec::same(ci, co, k, 1),
                       p(path + ".freq.weight"), p(path + ".freq.bias"));
      y = conv_bn_relu(p, path + ".freq", std::move(y));
    }
    y = conv1d_along(y, 2, ConvSpec::same(co, co, k, 1),
                     p(path + ".temporal.weight"), p(path + ".temporal.bias"));
    y = conv_bn_relu(p, path + ".temporal", std::move(y));
    sum_paths = sum_paths.defined() ? add(std::move(sum_paths), std::move(y))
                                    : std::move(y);
  }
  x = Var<T>();
  auto mixed =
    pointwise(sum_paths, p(prefix + ".mix.weight"), p(prefix + ".mix.bias"));
  sum_paths = Var<T>();
  return conv_bn_relu(p, prefix + ".mix", std::move(mixed));
}

template <typename T>
Var<T> visual_encode(ParamBinder<T> &p, const ModelConfig &cfg, Var<T> faces) {
  const Shape &s = faces.shape();
  if (s.size() != 5 || s[0] != 1 || s[3] != kFaceSize || s[4] != kFaceSize)
    throw ShapeError("visual_encode: faces must be [1, B, T, 112, 112], got " +
                     to_string(s));
  Var<T> x = std::move(faces);
  for (std::size_t b = 0; b < 3; ++b) {
    x = encoder_block(p, "visual.block" + std::to_string(b + 1), std::move(x),
                      BlockKind::visual, kBlockChannels[b], cfg.kernel_paths,
                      b == 0 ? 2 : 1);
    x = maxpool_along(x, {3, 4});
  }
  x = global_reduce(x, {3, 4}, ReduceOp::max);
  return permute(x, {1, 2, 0});
}

template <typename T>
Var<T> audio_encode(ParamBinder<T> &p, const ModelConfig &cfg, Var<T> mfcc) {
  const Shape &s = mfcc.shape();
  if (s.size() != 4 || s[0] != 1 || s[3] != 13)
    throw ShapeError("audio_encode: mfcc must be [1, B, 4T, 13], got " +
                     to_string(s));
  Var<T> x = std::move(mfcc);
  for (std::size_t b = 0; b < 3; ++b) {
    x = encoder_block(p, "audio.block" + std::to_string(b + 1), std::move(x),
                      BlockKind::audio, kBlockChannels[b], cfg.kernel_paths);
    if (b < 2)
      x = maxpool_along(x, {2});
  }
  x = global_reduce(x, {3}, ReduceOp::mean);
  return permute(x, {1, 2, 0});
}

template <typename T> Var<T> fuse(Var<T> visual, Var<T> audio) {
  if (visual.shape() != audio.shape())
    throw ShapeError("fuse: visual features " + to_string(visual.shape()) +
                     " and audio features " + to_string(audio.shape()) +
                     " differ");
  return add(std::move(visual), std::move(audio));
}

namespace {

template <typename T>
Var<T> gru_pass(ParamBinder<T> &p, const std::string &dir, const Var<T> &x,
                bool reverse) {
  const std::string g = "detector.gru_" + dir;
  return gru_sequence(x, p(g + ".weight_ih"), p(g + ".weight_hh"),
                      p(g + ".bias_ih"), p(g + ".bias_hh"), reverse);
}

} // namespace

template <typename T>
Var<T> detect(ParamBinder<T> &p, const ModelConfig &cfg, const Var<T> &fused) {
  Var<T> h;
  switch (cfg.detector) {
  case DetectorVariant::none:
    h = fused;
    break;
  case DetectorVariant::forward:
    h = gru_pass(p, "fwd", fused, false);
    break;
  case DetectorVariant::bidirectional:
    h = concat_last(gru_pass(p, "fwd", fused, false),
                    gru_pass(p, "bwd", fused, true));
    break;
  }
  return linear(h, p("detector.fc.weight"), p("detector.fc.bias"));
}

template <typename T>
Var<T> aux_logits(ParamBinder<T> &p, const Var<T> &visual) {
  return linear(visual, p("aux.fc.weight"), p("aux.fc.bias"));
}

template <typename T>
NetworkOutput<T> run_network(ParamBinder<T> &p, const ModelConfig &cfg,
                             Var<T> faces, Var<T> mfcc, bool with_aux) {
  const std::size_t frames = faces.shape().size() == 5 ? faces.shape()[2] : 0;
  if (mfcc.shape().size() == 4 && mfcc.shape()[2] != 4 * frames)
    throw ShapeError("audio has " + std::to_string(mfcc.shape()[2]) +
                     " MFCC frames but " + std::to_string(frames) +
                     " video frames need exactly " +
                     std::to_string(4 * frames));
  if (faces.shape().size() == 5 && mfcc.shape().size() == 4 &&
      faces.shape()[1] != mfcc.shape()[1])
    throw ShapeError("faces and audio batch sizes differ");
  NetworkOutput<T> out;
  auto visual = visual_encode(p, cfg, std::move(faces));
  if (with_aux)
    out.visual_logits = aux_logits(p, visual);
  auto audio = audio_encode(p, cfg, std::move(mfcc));
  out.logits = detect(p, cfg, fuse(std::move(visual), std::move(audio)));
  return out;
}

#define LASD_INSTANTIATE(T)                                                    \
  template class ParamBinder<T>;                                               \
  template Var<T> encoder_block(ParamBinder<T> &, const std::string &, Var<T>, \
                                BlockKind, std::size_t,                        \
                                const std::vector<std::size_t> &,              \
                                std::size_t);                                  \
  template Var<T> visual_encode(ParamBinder<T> &, const ModelConfig &,         \
                                Var<T>);                                       \
  template Var<T> audio_encode(ParamBinder<T> &, const ModelConfig &, Var<T>); \
  template Var<T> fuse(Var<T>, Var<T>);                                        \
  template Var<T> detect(ParamBinder<T> &, const ModelConfig &,                \
                         const Var<T> &);                                      \
  template Var<T> aux_logits(ParamBinder<T> &, const Var<T> &);                \
  template NetworkOutput<T> run_network(ParamBinder<T> &, const ModelConfig &, \
                                        Var<T>, Var<T>, bool);

LASD_INSTANTIATE(float)
LASD_INSTANTIATE(double)
#undef LASD_INSTANTIATE

} // namespace lasd
