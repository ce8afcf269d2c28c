// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

#include "voxflow/audio.hpp"
#include "voxflow/flow.hpp"

namespace voxflow {

// Utterance-level voice conversion: peak-normalize, frame at 50% overlap
// (last frame zero-padded), run each frame forward with the source identity
// and inverse with the target identity, Hann overlap-add, renormalize, trim
// to the input length.
Waveform convert_utterance(FlowModel<float>& model, const Waveform& wav, int y_src, int y_tgt,
                           int64_t frames_per_batch = 16);

struct ConversionJob {
  std::string input_path;
  std::string source_speaker;
  std::string target_speaker;  // empty: draw uniformly from the other speakers
  std::string output_path;
};

// Fill empty targets with a seeded uniform draw over the other speakers.
void assign_random_targets(std::vector<ConversionJob>& jobs,
                           const std::vector<std::string>& speaker_names, uint64_t seed);

struct BatchConvertReport {
  struct Row {
    ConversionJob job;
    bool ok = false;
    std::string error;
  };
  std::vector<Row> rows;
  int64_t converted = 0;
  int64_t failed = 0;
};

// Runs every job, collecting per-job errors instead of stopping. Writes the
// conversion manifest (CSV: input,src,tgt,output) when manifest_path is
// non-empty; every job appears in the manifest whether or not it succeeded.
BatchConvertReport batch_convert(FlowModel<float>& model,
                                 const std::vector<std::string>& speaker_names,
                                 const std::vector<ConversionJob>& jobs,
                                 const std::string& manifest_path);

}  // namespace voxflow
