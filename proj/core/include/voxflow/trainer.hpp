// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "voxflow/adam.hpp"
#include "voxflow/corpus.hpp"
#include "voxflow/flow.hpp"

namespace voxflow {

struct TrainState {
  int64_t epoch = 0;
  double best_val_nll = std::numeric_limits<double>::infinity();
  int64_t epochs_since_improvement = 0;
  int64_t anneal_count = 0;
  double initial_lr = 1e-4;
  double current_lr = 1e-4;
  uint64_t rng_seed = 0;
  std::string rng_state;  // serialized batch-iterator engine for exact resume
};

// Validation-driven annealing: divide the learning rate by `factor` after
// `patience` consecutive epochs without a strictly better validation NLL,
// reset the counter, and stop at the `max_anneals`-th event.
class AnnealSchedule {
 public:
  AnnealSchedule(double initial_lr, int64_t patience = 10, double factor = 5.0,
                 int64_t max_anneals = 3)
      : initial_lr_(initial_lr), patience_(patience), factor_(factor), max_anneals_(max_anneals) {}

  static AnnealSchedule from_state(const TrainState& st, int64_t patience = 10, double factor = 5.0,
                                   int64_t max_anneals = 3) {
    AnnealSchedule s(st.initial_lr, patience, factor, max_anneals);
    s.best_ = st.best_val_nll;
    s.since_ = st.epochs_since_improvement;
    s.anneals_ = st.anneal_count;
    return s;
  }

  struct Decision {
    bool improved = false;
    bool annealed = false;
    bool stop = false;
  };

  Decision observe(double val_nll) {
    Decision d;
    if (val_nll < best_) {
      best_ = val_nll;
      since_ = 0;
      d.improved = true;
      return d;
    }
    if (++since_ >= patience_) {
      since_ = 0;
      ++anneals_;
      d.annealed = true;
      if (anneals_ >= max_anneals_) d.stop = true;
    }
    return d;
  }

  double lr() const {
    double lr = initial_lr_;
    for (int64_t i = 0; i < anneals_; ++i) lr /= factor_;
    return lr;
  }
  int64_t anneal_count() const { return anneals_; }
  int64_t epochs_since_improvement() const { return since_; }
  double best() const { return best_; }

 private:
  double initial_lr_;
  int64_t patience_;
  double factor_;
  int64_t max_anneals_;
  double best_ = std::numeric_limits<double>::infinity();
  int64_t since_ = 0;
  int64_t anneals_ = 0;
};

struct TrainOptions {
  double lr = 1e-4;
  int64_t batch_size = 16;       // desk-scale default; 114 at full scale
  int64_t patience = 10;
  double anneal_factor = 5.0;
  int64_t max_anneals = 3;
  int64_t max_epochs = 999;
  double grad_clip = 0.0;        // global L2 clip; 0 disables
  uint64_t seed = 1234;
  AugmentConfig augment;
  bool augment_enabled = true;
  int64_t eval_batch_size = 64;
  std::string run_dir;           // empty: keep everything in memory
  std::function<void(const std::string&)> log;
};

struct EpochRecord {
  int64_t epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  TrainState state;
  double best_val_nll = std::numeric_limits<double>::infinity();
  std::string best_checkpoint;
  std::string last_checkpoint;
};

// Mean negative log-likelihood per dimension over every frame of the index,
// without augmentation, in index order. Deterministic.
double evaluate_nll(FlowModel<float>& model, const Corpus& corpus, const FrameIndex& idx,
                    int64_t batch_size = 64);

// Full training loop. Resumes from *resume_state / *resume_adam when given
// (both must come from the same checkpoint).
TrainResult train(FlowModel<float>& model, const Corpus& corpus, const FrameIndex& train_idx,
                  const FrameIndex& val_idx, const std::vector<std::string>& speaker_names,
                  const TrainOptions& opts, const TrainState* resume_state = nullptr,
                  AdamState<float>* resume_adam = nullptr);

// Throws when any sentence key is assigned to more than one split.
void assert_sentence_disjoint(const Corpus& corpus);

}  // namespace voxflow
