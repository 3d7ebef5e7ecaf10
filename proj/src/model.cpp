// SPDX-License-Identifier: Apache-2.0
#include <lasd/loss.hpp>
#include <lasd/model.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

namespace lasd {

namespace {

constexpr std::size_t kAudioFramesPerBlock[3] = {4, 2, 1};
constexpr std::size_t kVisualExtent[3] = {56, 28, 14};

void add_conv(std::vector<ParamSpec> &out, const std::string &name,
              Shape weight, std::size_t co) {
  out.push_back({name + ".weight", std::move(weight)});
  out.push_back({name + ".bias", {co}});
  out.push_back({name + "_bn.gamma", {co}});
  out.push_back({name + "_bn.beta", {co}});
  out.push_back({name + "_bn.running_mean", {co}, false});
  out.push_back({name + "_bn.running_var", {co}, false});
}

void add_gru(std::vector<ParamSpec> &out, const std::string &name) {
  const std::size_t h = kGruHidden;
  out.push_back({name + ".weight_ih", {3 * h, kFeatureDim}});
  out.push_back({name + ".weight_hh", {3 * h, h}});
  out.push_back({name + ".bias_ih", {3 * h}});
  out.push_back({name + ".bias_hh", {3 * h}});
}

std::size_t fc_inputs(DetectorVariant v) {
  return v == DetectorVariant::bidirectional ? 2 * kGruHidden : kGruHidden;
}

bool starts_with(const std::string &s, const std::string &prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

} // namespace

std::vector<ParamSpec> param_manifest(const ModelConfig &cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  for (const char *enc : {"visual", "audio"}) {
    const bool visual = std::strcmp(enc, "visual") == 0;
    std::size_t ci = 1;
    for (std::size_t b = 0; b < 3; ++b) {
      const std::size_t co = kBlockChannels[b];
      const std::string block =
        std::string(enc) + ".block" + std::to_string(b + 1);
      for (std::size_t k : cfg.kernel_paths) {
        const std::string path = block + ".path" + std::to_string(k);
        if (visual)
          add_conv(out, path + ".spatial", {co, ci, k, k}, co);
        else
          add_conv(out, path + ".freq", {co, ci, k}, co);
        add_conv(out, path + ".temporal", {co, co, k}, co);
      }
      add_conv(out, block + ".mix", {co, co}, co);
      ci = co;
    }
  }
  if (cfg.detector != DetectorVariant::none)
    add_gru(out, "detector.gru_fwd");
  if (cfg.detector == DetectorVariant::bidirectional)
    add_gru(out, "detector.gru_bwd");
  out.push_back({"detector.fc.weight", {2, fc_inputs(cfg.detector)}});
  out.push_back({"detector.fc.bias", {2}});
  if (cfg.include_aux_head) {
    out.push_back({"aux.fc.weight", {2, kFeatureDim}, true, true});
    out.push_back({"aux.fc.bias", {2}, true, true});
  }
  std::sort(out.begin(), out.end(),
            [](const ParamSpec &a, const ParamSpec &b) { return a.name < b.name; });
  return out;
}

ModelWeights build(const ModelConfig &cfg, std::uint64_t seed) {
  const auto manifest = param_manifest(cfg);
  std::map<std::string, Shape> shapes;
  for (const auto &s : manifest)
    shapes[s.name] = s.shape;
  std::mt19937_64 rng(seed);
  ModelWeights w;
  for (const auto &spec : manifest) {
    const std::string &name = spec.name;
    Tensor<float> t(spec.shape);
    auto ends = [&](const char *suffix) {
      const std::size_t n = std::strlen(suffix);
      return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
    };
    if (ends(".gamma") || ends(".running_var")) {
      t.fill(1.0f);
    } else if (ends(".beta") || ends(".running_mean")) {
      t.fill(0.0f);
    } else {
      double bound;
      if (name.find(".gru_") != std::string::npos) {
        bound = 1.0 / std::sqrt(double(kGruHidden));
      } else {
        const std::string stem = name.substr(0, name.rfind('.'));
        const Shape &ws = shapes.at(stem + ".weight");
        bound = 1.0 / std::sqrt(double(numel(ws) / ws[0]));
      }
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto &v : t.data())
        v = float(dist(rng));
    }
    w.emplace(name, std::move(t));
  }
  return w;
}

std::size_t count_params(const ModelConfig &cfg) {
  std::size_t total = 0;
  for (const auto &m : module_breakdown(cfg))
    total += m.params;
  return total;
}

std::vector<ModuleCount> module_breakdown(const ModelConfig &cfg) {
  std::vector<ModuleCount> out = {
    {"visual_encoder"}, {"audio_encoder"}, {"detector"}};
  for (const auto &s : param_manifest(cfg)) {
    if (!s.trainable || s.training_only)
      continue;
    const std::size_t idx = starts_with(s.name, "visual.") ? 0
                            : starts_with(s.name, "audio.") ? 1
                                                            : 2;
    out[idx].params += numel(s.shape);
  }

  std::size_t ci = 1;
  for (std::size_t b = 0; b < 3; ++b) {
    const double co = double(kBlockChannels[b]);
    const double pixels = double(kVisualExtent[b] * kVisualExtent[b]);
    const double cells = double(kAudioFramesPerBlock[b] * kMfccCoefficients);
    for (std::size_t k : cfg.kernel_paths) {
      out[0].flops += (double(ci) * co * double(k * k) + co * co * double(k)) * pixels;
      out[1].flops += (double(ci) * co * double(k) + co * co * double(k)) * cells;
    }
    out[0].flops += co * co * pixels;
    out[1].flops += co * co * cells;
    ci = kBlockChannels[b];
  }
  const double gru = 3.0 * double(kFeatureDim + kGruHidden) * double(kGruHidden);
  if (cfg.detector == DetectorVariant::forward)
    out[2].flops += gru;
  if (cfg.detector == DetectorVariant::bidirectional)
    out[2].flops += 2 * gru;
  out[2].flops += 2.0 * double(fc_inputs(cfg.detector));
  return out;
}

double estimate_flops(const ModelConfig &cfg, std::size_t frames,
                      std::size_t candidates) {
  if (frames < 1)
    throw Error("estimate_flops: frame count must be at least 1");
  // every layer is applied once per frame; the per-frame cost does not
  // depend on the sequence length
  double per_frame = 0;
  for (const auto &m : module_breakdown(cfg))
    per_frame += m.flops;
  return per_frame * double(candidates);
}

void check_weights(const ModelWeights &w, const ModelConfig &cfg) {
  std::set<std::string> expected;
  for (const auto &s : param_manifest(cfg)) {
    expected.insert(s.name);
    auto it = w.find(s.name);
    if (it == w.end()) {
      if (s.training_only)
        continue;
      throw ContainerError(ContainerErrc::shape_mismatch,
                           "weights: missing tensor '" + s.name + "'");
    }
    if (it->second.shape() != s.shape)
      throw ContainerError(ContainerErrc::shape_mismatch,
                           "weights: tensor '" + s.name + "' has shape " +
                             to_string(it->second.shape()) + ", expected " +
                             to_string(s.shape));
  }
  for (const auto &[name, t] : w)
    if (!expected.count(name))
      throw ContainerError(ContainerErrc::shape_mismatch,
                           "weights: unexpected tensor '" + name +
                             "' for this configuration");
}

ModelConfig infer_config(const ModelWeights &w) {
  ModelConfig cfg;
  cfg.kernel_paths.clear();
  for (std::size_t k : {3, 5, 7})
    if (w.count("visual.block1.path" + std::to_string(k) + ".spatial.weight"))
      cfg.kernel_paths.push_back(k);
  cfg.detector = w.count("detector.gru_bwd.weight_ih") ? DetectorVariant::bidirectional
                 : w.count("detector.gru_fwd.weight_ih") ? DetectorVariant::forward
                                                         : DetectorVariant::none;
  cfg.include_aux_head = w.count("aux.fc.weight") > 0;
  cfg.validate();
  return cfg;
}

Prediction forward(const ModelWeights &w, const ModelConfig &cfg,
                   const TensorF &faces, const MfccMap &mfcc) {
  const Shape &s = faces.shape();
  if (s.size() != 3 || s[1] != kFaceSize || s[2] != kFaceSize)
    throw ShapeError("faces must be [T, 112, 112], got " + to_string(s));
  const std::size_t frames = s[0];
  if (mfcc.frames != kAudioFramesPerVideoFrame * frames)
    throw ShapeError("audio is misaligned: " + std::to_string(mfcc.frames) +
                     " MFCC frames for " + std::to_string(frames) +
                     " video frames (expected " +
                     std::to_string(kAudioFramesPerVideoFrame * frames) + ")");
  ParamBinder<float> binder(w);
  TensorF audio = mfcc.to_tensor();
  auto out = run_network(binder, cfg,
                         constant(faces.reshaped({1, 1, frames, kFaceSize, kFaceSize})),
                         constant(std::move(audio)));
  Prediction pred;
  pred.logits = std::move(out.logits).take().reshaped({frames, 2});
  pred.p_speaking = softmax_temp(pred.logits, 1.0);
  return pred;
}

namespace {

template <typename U> void put(std::ostream &out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i)
    b[i] = static_cast<unsigned char>((std::uint64_t(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char *>(b), sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::istream &in) : in_(in) {}

  void bytes(void *dst, std::size_t n, const std::string &what) {
    in_.read(static_cast<char *>(dst), std::streamsize(n));
    if (std::size_t(in_.gcount()) != n)
      throw ContainerError(ContainerErrc::truncated,
                           "container truncated while reading " + what);
  }
  template <typename U> U get(const std::string &what) {
    unsigned char b[sizeof(U)];
    bytes(b, sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= std::uint64_t(b[i]) << (8 * i);
    return U(v);
  }

 private:
  std::istream &in_;
};

} // namespace

void save_tensors(std::ostream &out, const ModelWeights &tensors) {
  out.write("LASD", 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, tensors.size());
  for (const auto &[name, t] : tensors) {
    if (name.size() > 0xffff)
      throw Error("tensor name too long: " + name.substr(0, 40) + "...");
    put<std::uint16_t>(out, std::uint16_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    put<std::uint8_t>(out, 0);
    put<std::uint8_t>(out, std::uint8_t(t.rank()));
    for (std::size_t e : t.shape())
      put<std::uint64_t>(out, e);
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put<std::uint32_t>(out, bits);
    }
  }
  if (!out)
    throw Error("failed writing tensor container");
}

ModelWeights load_tensors(std::istream &in) {
  Reader r(in);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "LASD", 4) != 0)
    throw ContainerError(ContainerErrc::bad_magic,
                         "not a tensor container (bad magic bytes)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion)
    throw ContainerError(ContainerErrc::bad_version,
                         "unsupported container version " +
                           std::to_string(version));
  const auto count = r.get<std::uint64_t>("tensor count");
  ModelWeights out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string entry = "entry " + std::to_string(i) + " of " +
                              std::to_string(count);
    const auto len = r.get<std::uint16_t>(entry + " (name length)");
    std::string name(len, '\0');
    r.bytes(name.data(), len, entry + " (name)");
    const auto dtype = r.get<std::uint8_t>(entry + " (dtype)");
    if (dtype != 0)
      throw ContainerError(ContainerErrc::unsupported_dtype,
                           entry + " '" + name + "': unsupported dtype code " +
                             std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>(entry + " (rank)");
    Shape shape(rank);
    for (auto &e : shape)
      e = std::size_t(r.get<std::uint64_t>(entry + " (extents)"));
    if (out.count(name))
      throw ContainerError(ContainerErrc::duplicate_name,
                           entry + ": duplicate tensor name '" + name + "'");
    std::size_t n = 1;
    for (std::size_t e : shape) {
      if (e == 0 || n > (std::size_t(1) << 34) / e)
        throw ContainerError(ContainerErrc::shape_mismatch,
                             entry + " '" + name + "': invalid extents " +
                               to_string(shape));
      n *= e;
    }
    std::vector<std::uint8_t> raw(n * 4);
    r.bytes(raw.data(), raw.size(), entry + " '" + name + "' (data)");
    Tensor<float> t(shape);
    for (std::size_t j = 0; j < n; ++j) {
      const std::uint32_t bits = std::uint32_t(raw[4 * j]) |
                                 (std::uint32_t(raw[4 * j + 1]) << 8) |
                                 (std::uint32_t(raw[4 * j + 2]) << 16) |
                                 (std::uint32_t(raw[4 * j + 3]) << 24);
      std::memcpy(&t[j], &bits, 4);
    }
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

void save_weights(const std::filesystem::path &path, const ModelWeights &w) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write " + path.string());
  save_tensors(out, w);
}

ModelWeights load_weights(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open " + path.string());
  return load_tensors(in);
}

ModelWeights load_weights(const std::filesystem::path &path,
                          const ModelConfig &cfg) {
  auto w = load_weights(path);
  check_weights(w, cfg);
  return w;
}

void save_faces(const std::filesystem::path &path, const TensorF &faces) {
  save_weights(path, ModelWeights{{"faces", faces}});
}

TensorF load_faces(const std::filesystem::path &path) {
  auto c = load_weights(path);
  auto it = c.find("faces");
  if (c.size() != 1 || it == c.end())
    throw ContainerError(ContainerErrc::shape_mismatch,
                         path.string() + ": expected a single tensor named 'faces'");
  const Shape &s = it->second.shape();
  if (s.size() != 3 || s[1] != kFaceSize || s[2] != kFaceSize)
    throw ContainerError(ContainerErrc::shape_mismatch,
                         path.string() + ": faces must be [T, 112, 112], got " +
                           to_string(s));
  return std::move(it->second);
}

} // namespace lasd
