// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

#include "voxflow/corpus.hpp"
#include "voxflow/flow.hpp"
#include "voxflow/mfcc.hpp"

namespace voxflow {

// z-scored linear softmax classifier with input dropout at train time.
struct SpoofClassifier {
  std::vector<double> feat_mean;
  std::vector<double> feat_std;  // zero-variance dims clamped to 1
  std::vector<std::vector<double>> weights;  // (classes, dim)
  std::vector<double> bias;

  int64_t n_classes() const { return static_cast<int64_t>(weights.size()); }
  std::vector<double> logits(const std::vector<double>& features) const;
  int predict(const std::vector<double>& features) const;  // deterministic argmax
};

struct ClassifierOptions {
  double lr = 1e-3;
  double dropout = 0.4;
  int64_t patience = 10;
  int64_t max_epochs = 400;
  int64_t batch_size = 32;
  uint64_t seed = 7;
};

SpoofClassifier train_linear_classifier(const std::vector<std::vector<double>>& train_x,
                                        const std::vector<int>& train_y,
                                        const std::vector<std::vector<double>>& val_x,
                                        const std::vector<int>& val_y, int64_t n_classes,
                                        const ClassifierOptions& opts = {});

double classifier_accuracy(const SpoofClassifier& clf, const std::vector<std::vector<double>>& x,
                           const std::vector<int>& y);

// Per-file MFCC summary features for one split.
struct FeatureSet {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  std::vector<std::string> paths;
};

// cache_path, when non-empty, memoizes per-file features in the same
// tensor-blob container as checkpoints; entries are keyed by path.
FeatureSet corpus_features(const Corpus& corpus, Split split, const std::string& cache_path = "");

// Train on the train split, early-stop on the validation split.
SpoofClassifier train_spoof_classifier(const Corpus& corpus, const ClassifierOptions& opts = {},
                                       const std::string& feature_cache = "");

struct SpoofingResult {
  double rate_pct = 0.0;  // conversions classified as their target, percent
  int64_t scored = 0;
  std::vector<std::string> missing;  // outputs that did not exist
};

// Scores a conversion manifest (CSV: input,src,tgt,output).
SpoofingResult spoofing_rate(const SpoofClassifier& clf, const std::string& manifest_path,
                             const std::vector<std::string>& speaker_names);

struct ProbeResult {
  double accuracy_pct = 0.0;
  double chance_pct = 0.0;
  int64_t train_count = 0;
  int64_t test_count = 0;
};

// Linear speaker probe on flattened z vectors: how much identity survives in
// the latent space. Frames are encoded with their true speaker.
ProbeResult latent_probe(FlowModel<float>& model, const Corpus& corpus,
                         const FrameIndex& train_idx, const FrameIndex& val_idx,
                         const FrameIndex& test_idx, const ClassifierOptions& opts = {},
                         int64_t max_train_frames = 4000, int64_t max_eval_frames = 1500);

}  // namespace voxflow
