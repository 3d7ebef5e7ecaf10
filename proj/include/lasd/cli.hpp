// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli.hpp
 * @brief  The `lasd` command-line front end as a library call.
 *
 * Subcommands: params, flops, synth, train, infer, eval, bench.
 */
#pragma once

#include <lasd/model.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace lasd {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,   // anything not listed below
  kExitUsage = 2,     // bad or unknown flags
  kExitMissing = 3,   // an input file does not exist
  kExitFormat = 4,    // malformed weights, faces or WAV
  kExitMisaligned = 5 // inputs disagree in length or shape
};

/// Runs one command. `args` excludes the program name.
int run_cli(const std::vector<std::string> &args, std::ostream &out,
            std::ostream &err);

struct BenchRow {
  std::size_t frames = 0;
  double seconds = 0; // forward pass only
  double fps = 0;
};

/// Wall-clock of forward() on deterministic inputs of each length; the best
/// of `repeats` runs is kept.
std::vector<BenchRow> benchmark(const ModelWeights &w, const ModelConfig &cfg,
                                const std::vector<std::size_t> &frames,
                                int repeats = 1);

/// Checks that a clip spans the same time as `frames` video frames (within
/// one frame) and returns its 4 * frames MFCC rows; throws ShapeError.
MfccMap mfcc_for_video(const AudioClip &clip, std::size_t frames);

} // namespace lasd
