// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "voxflow/audio.hpp"
#include "voxflow/tensor.hpp"

namespace voxflow {

enum class Split { train, validation, test, unassigned };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct Utterance {
  std::string path;
  int speaker = -1;
  std::string sentence_key;
  Split split = Split::unassigned;
};

struct BuildReport {
  int64_t valid = 0;
  std::vector<std::string> skipped;  // "path: reason"
  std::string to_string() const;
};

// Speaker-labeled utterance collection. Speaker ids are dense 0..S-1 in
// sorted-name order.
struct Corpus {
  std::vector<std::string> speaker_names;
  std::vector<Utterance> utterances;
  BuildReport report;

  int speaker_id(const std::string& name) const;
  std::vector<int64_t> utterances_of(Split s) const;
  int64_t count_of(Split s) const { return static_cast<int64_t>(utterances_of(s).size()); }
};

// Scan root/<speaker>/<utterance>.wav. A sidecar <utterance>.txt provides the
// sentence text; the sentence key falls back to the file stem. Unreadable
// files land in the build report; only a corpus with zero valid utterances is
// an error.
Corpus build_corpus(const std::string& root);

// Lowercased, punctuation-stripped, whitespace-collapsed sentence key.
std::string normalize_sentence(const std::string& text);

// Assign whole sentence-key groups to train/validation/test so no key spans
// two splits. Deterministic in the seed.
Corpus split_corpus(const Corpus& c, double val_frac, double test_frac, uint64_t seed);

// Line format: utterance_path<TAB>speaker<TAB>split
void save_manifest(const Corpus& c, const std::string& path);
Corpus load_manifest(const std::string& path);

struct FrameIndexEntry {
  int64_t utterance = 0;
  int64_t start = 0;
};

// Frame-level addressing for one split: every entry points at a non-silent,
// non-overlapping frame of a peak-normalized utterance. The per-utterance
// peak is cached so batch loading does not renormalize.
struct FrameIndex {
  Split split = Split::unassigned;
  int64_t frame_size = 4096;
  std::vector<FrameIndexEntry> entries;
  std::vector<float> utterance_peak;          // indexed like corpus.utterances
  std::vector<int64_t> empty_utterances;      // utterances with zero surviving frames
};

FrameIndex index_frames(const Corpus& c, Split split, int64_t frame_size = 4096);

struct FrameBatch {
  Tensor3f frames;            // (B, 1, frame_size)
  std::vector<int> speakers;  // length B
  bool epoch_end = false;
  bool short_batch = false;
};

// Serves shuffled mixed-speaker batches: one epoch is a full pass over a
// fresh permutation of the frame index, sampling without replacement.
// Single consumer; decoded waveforms are cached under a sample budget.
class BatchIterator {
 public:
  BatchIterator(const Corpus& corpus, const FrameIndex& index, int64_t batch_size,
                AugmentConfig augment_cfg, bool augment_enabled, uint64_t seed);

  FrameBatch next();
  int64_t epoch_size() const { return static_cast<int64_t>(index_.entries.size()); }
  Rng& rng() { return rng_; }

  // Load an utterance, normalized by the cached peak.
  const Waveform& waveform(int64_t utt);

 private:
  const Corpus& corpus_;
  const FrameIndex& index_;
  int64_t batch_size_;
  AugmentConfig cfg_;
  bool augment_;
  Rng rng_;
  std::vector<int64_t> order_;
  int64_t cursor_ = 0;
  std::map<int64_t, Waveform> cache_;
  std::vector<int64_t> cache_fifo_;
  int64_t cache_samples_ = 0;
  static constexpr int64_t kCacheBudgetSamples = 256LL << 20;  // ~1 GiB of float
};

}  // namespace voxflow
