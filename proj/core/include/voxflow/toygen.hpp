// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <string>

namespace voxflow {

// Synthetic desk-scale corpus: each "speaker" is a distinct vowel-like
// source process (pitch, formant pair, breathiness). Utterances contain
// syllable bursts separated by short pauses, so the silence gate has real
// work to do. Shared sentence sidecars exercise sentence-disjoint splits.
struct ToyCorpusConfig {
  int n_speakers = 2;
  double minutes_per_speaker = 10.0;
  double utterance_seconds = 4.0;
  int sample_rate = 16000;
  uint64_t seed = 1234;
};

// Writes <dir>/<speaker>/utt_NNN.wav (+ .txt sidecars); returns the number
// of files written.
int64_t generate_toy_corpus(const std::string& dir, const ToyCorpusConfig& cfg);

}  // namespace voxflow
