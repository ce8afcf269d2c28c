// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "voxflow/checkpoint.hpp"

namespace fs = std::filesystem;

namespace voxflow {

void assert_sentence_disjoint(const Corpus& corpus) {
  std::map<std::string, Split> seen;
  for (const auto& u : corpus.utterances) {
    if (u.split == Split::unassigned) continue;
    const auto it = seen.find(u.sentence_key);
    if (it != seen.end() && it->second != u.split)
      throw StateError("sentence key '" + u.sentence_key + "' appears in both " +
                       split_name(it->second) + " and " + split_name(u.split));
    seen.emplace(u.sentence_key, u.split);
  }
}

double evaluate_nll(FlowModel<float>& model, const Corpus& corpus, const FrameIndex& idx,
                    int64_t batch_size) {
  if (idx.entries.empty()) throw StateError("evaluate_nll on empty " + split_name(idx.split) + " index");
  const int64_t fs = idx.frame_size;

  // entries are grouped by utterance; keep the current file decoded
  int64_t cached_utt = -1;
  std::vector<float> cached;
  auto load = [&](int64_t utt) -> const std::vector<float>& {
    if (utt != cached_utt) {
      Waveform w = read_wav(corpus.utterances[static_cast<size_t>(utt)].path);
      const float peak = idx.utterance_peak[static_cast<size_t>(utt)];
      if (peak > 0.0f)
        for (float& v : w.samples) v /= peak;
      cached = std::move(w.samples);
      cached_utt = utt;
    }
    return cached;
  };

  double total = 0.0;
  int64_t count = 0;
  for (size_t pos = 0; pos < idx.entries.size();) {
    const int64_t b = std::min<int64_t>(batch_size, static_cast<int64_t>(idx.entries.size() - pos));
    Tensor3f x(b, 1, fs);
    std::vector<int> spk(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
      const auto& e = idx.entries[pos + static_cast<size_t>(i)];
      const auto& samples = load(e.utterance);
      std::copy(samples.begin() + e.start, samples.begin() + e.start + fs, x.row(i, 0));
      spk[static_cast<size_t>(i)] = corpus.utterances[static_cast<size_t>(e.utterance)].speaker;
    }
    const auto fr = model.forward(x, spk);
    for (const double v : fr.report.per_sample_per_dim) total += v;
    count += b;
    pos += static_cast<size_t>(b);
  }
  return -total / static_cast<double>(count);
}

namespace {

void write_history(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,train_nll,val_nll,lr,seconds\n";
  char line[160];
  for (const auto& r : history) {
    std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g,%.9g,%.3f\n",
                  static_cast<long long>(r.epoch), r.train_nll, r.val_nll, r.lr, r.seconds);
    out << line;
  }
}

double grad_norm(const std::vector<ParamView<float>>& params) {
  double acc = 0.0;
  for (const auto& p : params)
    for (int64_t i = 0; i < p.size; ++i) acc += static_cast<double>(p.grad[i]) * p.grad[i];
  return std::sqrt(acc);
}

void clip_grads(std::vector<ParamView<float>>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const float scale = static_cast<float>(max_norm / norm);
  for (auto& p : params)
    for (int64_t i = 0; i < p.size; ++i) p.grad[i] *= scale;
}

}  // namespace

TrainResult train(FlowModel<float>& model, const Corpus& corpus, const FrameIndex& train_idx,
                  const FrameIndex& val_idx, const std::vector<std::string>& speaker_names,
                  const TrainOptions& opts, const TrainState* resume_state,
                  AdamState<float>* resume_adam) {
  assert_sentence_disjoint(corpus);
  auto log = opts.log ? opts.log : [](const std::string&) {};

  BatchIterator batches(corpus, train_idx, opts.batch_size, opts.augment, opts.augment_enabled,
                        opts.seed);
  if (resume_state && !resume_state->rng_state.empty()) batches.rng().set_state(resume_state->rng_state);

  if (!model.actnorm_initialized()) {
    // one data-augmented batch, drawn from an independent stream
    BatchIterator init_batches(corpus, train_idx, opts.batch_size, opts.augment, opts.augment_enabled,
                               opts.seed ^ 0x9E3779B97F4A7C15ull);
    const auto init = init_batches.next();
    for (const auto& w : model.actnorm_init_batch(init.frames, init.speakers)) log("actnorm init: " + w);
  }

  AnnealSchedule schedule = resume_state
                                ? AnnealSchedule::from_state(*resume_state, opts.patience,
                                                             opts.anneal_factor, opts.max_anneals)
                                : AnnealSchedule(opts.lr, opts.patience, opts.anneal_factor, opts.max_anneals);

  AdamState<float> local_adam;
  AdamState<float>* adam = resume_adam ? resume_adam : &local_adam;
  auto params = model.parameters();
  if (!adam->initialized()) adam->init(params);
  adam->lr = schedule.lr();

  TrainResult result;
  result.state.initial_lr = opts.lr;
  result.state.rng_seed = opts.seed;
  if (resume_state) {
    result.state = *resume_state;
    result.best_val_nll = resume_state->best_val_nll;
    // keep earlier epochs in the rewritten history file
    if (!opts.run_dir.empty()) {
      std::ifstream prev(opts.run_dir + "/history.csv");
      std::string line;
      if (prev && std::getline(prev, line)) {
        while (std::getline(prev, line)) {
          EpochRecord r;
          long long ep = 0;
          if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf,%lf", &ep, &r.train_nll, &r.val_nll, &r.lr,
                          &r.seconds) == 5 &&
              ep <= resume_state->epoch) {
            r.epoch = ep;
            result.history.push_back(r);
          }
        }
      }
    }
  }

  const std::string best_path = opts.run_dir.empty() ? "" : opts.run_dir + "/best.ckpt";
  const std::string last_path = opts.run_dir.empty() ? "" : opts.run_dir + "/last.ckpt";
  if (!opts.run_dir.empty()) fs::create_directories(opts.run_dir);

  const int64_t first_epoch = result.state.epoch + 1;
  for (int64_t epoch = first_epoch; epoch <= opts.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double train_sum = 0.0;
    int64_t train_frames = 0;
    bool epoch_done = false;
    while (!epoch_done) {
      const auto batch = batches.next();
      model.zero_grad();
      double loss;
      try {
        loss = model.nll_backward(batch.frames, batch.speakers);
      } catch (const NonFiniteError& e) {
        if (!opts.run_dir.empty()) {
          result.state.epoch = epoch;
          result.state.rng_state = batches.rng().state();
          save_checkpoint(opts.run_dir + "/diagnostic.ckpt", model, speaker_names, result.state, adam);
        }
        log(std::string("aborting on non-finite loss: ") + e.what());
        throw;
      }
      if (opts.grad_clip > 0.0) clip_grads(params, opts.grad_clip);
      adam_step(*adam, params);
      model.bump_version();
      train_sum += loss * static_cast<double>(batch.frames.batch());
      train_frames += batch.frames.batch();
      epoch_done = batch.epoch_end;
    }

    const double val_nll = evaluate_nll(model, corpus, val_idx, opts.eval_batch_size);
    const auto decision = schedule.observe(val_nll);
    adam->lr = schedule.lr();

    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpochRecord rec{epoch, train_sum / static_cast<double>(train_frames), val_nll, schedule.lr(), seconds};
    result.history.push_back(rec);

    result.state.epoch = epoch;
    result.state.best_val_nll = schedule.best();
    result.state.epochs_since_improvement = schedule.epochs_since_improvement();
    result.state.anneal_count = schedule.anneal_count();
    result.state.current_lr = schedule.lr();
    result.state.rng_state = batches.rng().state();

    char msg[160];
    std::snprintf(msg, sizeof(msg), "epoch %lld: train %.4f, val %.4f, lr %.3g, %.1fs",
                  static_cast<long long>(epoch), rec.train_nll, rec.val_nll, rec.lr, seconds);
    log(msg);

    if (!opts.run_dir.empty()) {
      write_history(opts.run_dir + "/history.csv", result.history);
      save_checkpoint(last_path, model, speaker_names, result.state, adam);
      if (decision.improved) save_checkpoint(best_path, model, speaker_names, result.state, adam);
    }
    if (decision.improved) result.best_val_nll = val_nll;
    if (decision.annealed)
      log("annealed learning rate to " + std::to_string(schedule.lr()) + " (event " +
          std::to_string(schedule.anneal_count()) + ")");
    if (decision.stop) {
      log("stopping at the third anneal event");
      break;
    }
  }

  result.best_checkpoint = best_path;
  result.last_checkpoint = last_path;
  return result;
}

}  // namespace voxflow
