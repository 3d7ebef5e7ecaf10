// SPDX-License-Identifier: Apache-2.0
#include <lasd/cli.hpp>
#include <lasd/metrics.hpp>
#include <lasd/train.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>

namespace lasd {

namespace {

class MissingFile : public Error {
 public:
  MissingFile(const std::string &role, const std::filesystem::path &path)
    : Error(role + " file not found: " + path.string()) {}
};

void require_file(const std::string &role, const std::filesystem::path &path) {
  if (!std::filesystem::is_regular_file(path))
    throw MissingFile(role, path);
}

std::string millions(double n) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << n / 1e6 << " M";
  return s.str();
}

std::string giga(double n) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << n / 1e9 << " G";
  return s.str();
}

struct ModelFlags {
  std::vector<std::size_t> kernels{3, 5};
  std::string detector = "bi";

  void add_to(CLI::App *cmd) {
    cmd->add_option("--kernels", kernels, "kernel sizes of the parallel paths, e.g. 3,5")
      ->delimiter(',');
    cmd->add_option("--detector", detector, "none | forward | bi");
  }
  ModelConfig config() const {
    ModelConfig c;
    c.kernel_paths = kernels;
    c.detector = parse_detector_variant(detector);
    c.validate();
    return c;
  }
};

void print_breakdown(std::ostream &out, const ModelConfig &cfg, std::size_t candidates,
                     bool flops) {
  std::size_t total = 0;
  double total_flops = 0;
  for (const auto &m : module_breakdown(cfg)) {
    out << std::left << std::setw(16) << m.module << std::right;
    if (flops)
      out << std::setw(14) << std::size_t(m.flops * double(candidates)) << "  "
          << giga(m.flops * double(candidates)) << '\n';
    else
      out << std::setw(10) << m.params << "  " << millions(double(m.params)) << '\n';
    total += m.params;
    total_flops += m.flops * double(candidates);
  }
  out << std::left << std::setw(16) << "total" << std::right;
  if (flops)
    out << std::setw(14) << std::size_t(total_flops) << "  " << giga(total_flops) << '\n';
  else
    out << std::setw(10) << total << "  " << millions(double(total)) << '\n';
}

std::vector<double> read_column(const std::filesystem::path &path,
                                const std::string &role) {
  require_file(role, path);
  std::ifstream in(path);
  std::vector<double> values;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos)
      continue;
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(line.substr(first), &used);
    } catch (const std::exception &) {
      used = 0;
    }
    if (used == 0 || line.find_first_not_of(" \t\r", first + used) != std::string::npos)
      throw Error(role + " file " + path.string() + ", line " + std::to_string(n) +
                  ": expected one number, got '" + line + "'");
    values.push_back(v);
  }
  return values;
}

int cmd_eval(const std::filesystem::path &scores_path,
             const std::filesystem::path &labels_path, double threshold,
             std::ostream &out) {
  const auto scores = read_column(scores_path, "scores");
  const auto raw = read_column(labels_path, "labels");
  if (scores.size() != raw.size())
    throw ShapeError("scores and labels differ in length: " +
                     std::to_string(scores.size()) + " vs " + std::to_string(raw.size()));
  Labels labels(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] != 0 && raw[i] != 1)
      throw Error("labels file " + labels_path.string() + ": value " +
                  std::to_string(raw[i]) + " at entry " + std::to_string(i + 1) +
                  " is not 0 or 1");
    labels[i] = std::uint8_t(raw[i]);
  }
  out << std::fixed << std::setprecision(6);
  out << "AP " << average_precision(scores, labels) << '\n';
  out << "F1 " << f1(scores, labels, threshold) << '\n';
  return kExitOk;
}

struct TrainFlags {
  std::size_t sequences = 200, frames = 25, heldout = 0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> model_seed;
  std::filesystem::path out, trace;
  TrainConfig tc;
};

int cmd_train(const TrainFlags &f, const ModelConfig &cfg, std::ostream &out) {
  const auto trace_path =
    f.trace.empty() ? std::filesystem::path(f.out.string() + ".trace.csv") : f.trace;
  const auto corpus = make_synthetic(f.sequences, f.frames, f.seed);
  auto w = build(cfg, f.model_seed.value_or(f.seed));
  TrainConfig tc = f.tc;
  tc.seed = f.seed;
  out << std::fixed << std::setprecision(6);
  const auto trace = train(w, cfg, corpus, tc, [&](const EpochStats &s) {
    out << "epoch " << s.epoch << "  lr " << s.lr << "  tau " << s.tau << "  L_asd "
        << s.loss_asd << "  L_av " << s.loss_av << "  L_v " << s.loss_v << std::endl;
  });
  save_weights(f.out, w);
  std::ofstream csv(trace_path);
  if (!csv)
    throw Error("cannot write " + trace_path.string());
  write_trace(csv, trace);
  out << "weights: " << f.out.string() << "\ntrace: " << trace_path.string() << '\n';

  if (f.heldout > 0) {
    std::vector<double> scores;
    Labels labels;
    for (const auto &s : make_synthetic(f.heldout, f.frames, f.seed + 1)) {
      const auto p = forward(w, cfg, s.faces, s.mfcc);
      scores.insert(scores.end(), p.p_speaking.begin(), p.p_speaking.end());
      labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    }
    out << "held-out AP " << average_precision(scores, labels) << "  F1 "
        << f1(scores, labels) << '\n';
  }
  return kExitOk;
}

int cmd_synth(std::size_t frames, std::uint64_t seed,
              const std::filesystem::path &faces_path,
              const std::filesystem::path &audio_path,
              const std::filesystem::path &labels_path, std::ostream &out) {
  const auto s = make_synthetic(1, frames, seed).front();
  save_faces(faces_path, s.faces);
  write_wav(audio_path, s.audio);
  if (!labels_path.empty()) {
    std::ofstream l(labels_path);
    if (!l)
      throw Error("cannot write " + labels_path.string());
    for (auto v : s.labels)
      l << int(v) << '\n';
  }
  out << "wrote " << frames << " frames to " << faces_path.string() << " and "
      << audio_path.string() << '\n';
  return kExitOk;
}

int cmd_infer(const std::filesystem::path &weights_path,
              const std::filesystem::path &faces_path,
              const std::filesystem::path &audio_path, std::ostream &out) {
  require_file("weights", weights_path);
  require_file("faces", faces_path);
  require_file("audio", audio_path);
  const auto w = load_weights(weights_path);
  const auto cfg = infer_config(w);
  check_weights(w, cfg);
  const auto faces = load_faces(faces_path);
  const auto frames = faces.shape()[0];
  const auto m = mfcc_for_video(read_wav(audio_path), frames);
  const auto pred = forward(w, cfg, faces, m);
  out << std::fixed << std::setprecision(6);
  for (std::size_t t = 0; t < pred.p_speaking.size(); ++t)
    out << t << ' ' << pred.p_speaking[t] << '\n';
  return kExitOk;
}

int cmd_bench(const std::filesystem::path &weights_path, const ModelFlags &model,
              const std::vector<std::size_t> &frames, int repeats, std::ostream &out) {
  ModelWeights w;
  ModelConfig cfg;
  if (weights_path.empty()) {
    cfg = model.config();
    w = build(cfg, 0);
  } else {
    require_file("weights", weights_path);
    w = load_weights(weights_path);
    cfg = infer_config(w);
    check_weights(w, cfg);
  }
  out << std::setw(8) << "frames" << std::setw(12) << "seconds" << std::setw(12)
      << "fps" << '\n';
  for (std::size_t t : frames) {
    const auto row = benchmark(w, cfg, {t}, repeats).front();
    out << std::setw(8) << row.frames << std::fixed << std::setprecision(4)
        << std::setw(12) << row.seconds << std::setprecision(1) << std::setw(12)
        << row.fps << std::endl;
  }
  return kExitOk;
}

} // namespace

MfccMap mfcc_for_video(const AudioClip &clip, std::size_t frames) {
  const double samples_per_frame = double(kModelSampleRate) / 25.0;
  const double expected = double(frames) * samples_per_frame;
  const double have = double(clip.samples.size());
  if (clip.sample_rate != kModelSampleRate)
    throw ShapeError("audio sample rate is " + std::to_string(clip.sample_rate) +
                     " Hz; the model needs 16000 Hz");
  if (std::abs(have - expected) > samples_per_frame) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << "audio is misaligned with the faces: "
      << have / kModelSampleRate << " s of audio for " << frames << " frames ("
      << expected / kModelSampleRate << " s at 25 fps)";
    throw ShapeError(s.str());
  }
  return align(mfcc(clip), frames);
}

std::vector<BenchRow> benchmark(const ModelWeights &w, const ModelConfig &cfg,
                                const std::vector<std::size_t> &frames, int repeats) {
  if (repeats < 1)
    throw Error("benchmark: repeats must be at least 1");
  std::vector<BenchRow> rows;
  std::mt19937 rng(0);
  std::uniform_real_distribution<float> u(0.0f, 1.0f), c(-20.0f, 20.0f);
  for (std::size_t t : frames) {
    if (t < 1)
      throw Error("benchmark: frame counts must be at least 1");
    TensorF faces({t, kFaceSize, kFaceSize});
    for (auto &v : faces.data())
      v = u(rng);
    MfccMap m;
    m.frames = kAudioFramesPerVideoFrame * t;
    m.values.resize(m.frames * kMfccCoefficients);
    for (auto &v : m.values)
      v = c(rng);
    double best = INFINITY;
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto pred = forward(w, cfg, faces, m);
      const auto t1 = std::chrono::steady_clock::now();
      if (pred.p_speaking.size() != t)
        throw Error("benchmark: forward returned the wrong number of frames");
      best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    rows.push_back({t, best, double(t) / best});
  }
  return rows;
}

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Lightweight audio-visual active speaker detection", "lasd"};
  app.require_subcommand(1);
  app.fallthrough(false);

  ModelFlags model;
  auto *params = app.add_subcommand("params", "parameter count per module");
  model.add_to(params);

  std::size_t candidates = 1;
  auto *flops = app.add_subcommand("flops", "FLOPs per frame per module");
  model.add_to(flops);
  flops->add_option("--candidates", candidates, "candidate faces per frame")
    ->check(CLI::PositiveNumber);

  std::size_t synth_frames = 25;
  std::uint64_t synth_seed = 0;
  std::filesystem::path synth_faces, synth_audio, synth_labels;
  auto *synth = app.add_subcommand("synth", "write one synthetic face track and WAV");
  synth->add_option("--frames", synth_frames)->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--faces", synth_faces)->required();
  synth->add_option("--audio", synth_audio)->required();
  synth->add_option("--labels", synth_labels, "optional ground-truth file");

  TrainFlags tf;
  auto *trainc = app.add_subcommand("train", "train on the synthetic corpus");
  model.add_to(trainc);
  trainc->add_option("--synthetic", tf.sequences, "training sequences")
    ->check(CLI::PositiveNumber);
  trainc->add_option("--frames", tf.frames)->check(CLI::PositiveNumber);
  trainc->add_option("--seed", tf.seed, "corpus and batch-order seed");
  trainc->add_option("--model-seed", tf.model_seed, "initialization seed (default: --seed)");
  trainc->add_option("--out", tf.out, "weights file")->required();
  trainc->add_option("--trace", tf.trace, "loss trace CSV (default: <out>.trace.csv)");
  trainc->add_option("--epochs", tf.tc.epochs)->check(CLI::PositiveNumber);
  trainc->add_option("--batch", tf.tc.batch)->check(CLI::PositiveNumber);
  trainc->add_option("--lr", tf.tc.lr0)->check(CLI::NonNegativeNumber);
  trainc->add_option("--heldout", tf.heldout, "held-out sequences to score afterwards");

  std::filesystem::path weights, faces, audio;
  auto *infer = app.add_subcommand("infer", "per-frame speaking probability");
  infer->add_option("--weights", weights)->required();
  infer->add_option("--faces", faces)->required();
  infer->add_option("--audio", audio)->required();

  std::filesystem::path scores_path, labels_path;
  double threshold = 0.5;
  auto *eval = app.add_subcommand("eval", "AP and F1 of plain-text scores");
  eval->add_option("--scores", scores_path)->required();
  eval->add_option("--labels", labels_path)->required();
  eval->add_option("--threshold", threshold);

  std::filesystem::path bench_weights;
  std::vector<std::size_t> bench_frames{1, 500, 1000};
  int repeats = 1;
  auto *bench = app.add_subcommand("bench", "forward-pass throughput per sequence length");
  model.add_to(bench);
  bench->add_option("--weights", bench_weights, "default: a freshly built model");
  bench->add_option("--frames", bench_frames)->delimiter(',');
  bench->add_option("--repeats", repeats)->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    app.exit(e, out, err);
    err << app.help();
    return kExitUsage;
  }

  try {
    if (*params) {
      print_breakdown(out, model.config(), 1, false);
      return kExitOk;
    }
    if (*flops) {
      out << "per frame, " << candidates << " candidate(s)\n";
      print_breakdown(out, model.config(), candidates, true);
      return kExitOk;
    }
    if (*synth)
      return cmd_synth(synth_frames, synth_seed, synth_faces, synth_audio, synth_labels,
                       out);
    if (*trainc)
      return cmd_train(tf, model.config(), out);
    if (*infer)
      return cmd_infer(weights, faces, audio, out);
    if (*eval)
      return cmd_eval(scores_path, labels_path, threshold, out);
    if (*bench)
      return cmd_bench(bench_weights, model, bench_frames, repeats, out);
  } catch (const MissingFile &e) {
    err << "error: " << e.what() << '\n';
    return kExitMissing;
  } catch (const ContainerError &e) {
    err << "error: malformed container: " << e.what() << '\n';
    return kExitFormat;
  } catch (const WavError &e) {
    err << "error: malformed WAV: " << e.what() << '\n';
    return kExitFormat;
  } catch (const ShapeError &e) {
    err << "error: " << e.what() << '\n';
    return kExitMisaligned;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

} // namespace lasd
