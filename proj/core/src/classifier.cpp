// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "voxflow/checkpoint.hpp"
#include "voxflow/errors.hpp"

namespace fs = std::filesystem;

namespace voxflow {

namespace {

std::vector<double> zscore(const SpoofClassifier& clf, const std::vector<double>& x) {
  std::vector<double> z(x.size());
  for (size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - clf.feat_mean[i]) / clf.feat_std[i];
  return z;
}

double cross_entropy(const std::vector<double>& logits, int label) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const double v : logits) mx = std::max(mx, v);
  double lse = 0.0;
  for (const double v : logits) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  return lse - logits[static_cast<size_t>(label)];
}

}  // namespace

std::vector<double> SpoofClassifier::logits(const std::vector<double>& features) const {
  const auto z = zscore(*this, features);
  std::vector<double> out(weights.size());
  for (size_t c = 0; c < weights.size(); ++c) {
    double acc = bias[c];
    const auto& w = weights[c];
    for (size_t i = 0; i < z.size(); ++i) acc += w[i] * z[i];
    out[c] = acc;
  }
  return out;
}

int SpoofClassifier::predict(const std::vector<double>& features) const {
  const auto l = logits(features);
  return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
}

SpoofClassifier train_linear_classifier(const std::vector<std::vector<double>>& train_x,
                                        const std::vector<int>& train_y,
                                        const std::vector<std::vector<double>>& val_x,
                                        const std::vector<int>& val_y, int64_t n_classes,
                                        const ClassifierOptions& opts) {
  if (n_classes < 2) throw ConfigError("classifier needs at least 2 classes, got " + std::to_string(n_classes));
  if (train_x.empty()) throw ConfigError("classifier training set is empty");
  const size_t dim = train_x[0].size();

  SpoofClassifier clf;
  clf.feat_mean.assign(dim, 0.0);
  clf.feat_std.assign(dim, 0.0);
  for (const auto& x : train_x)
    for (size_t i = 0; i < dim; ++i) clf.feat_mean[i] += x[i];
  for (auto& v : clf.feat_mean) v /= static_cast<double>(train_x.size());
  for (const auto& x : train_x)
    for (size_t i = 0; i < dim; ++i) {
      const double d = x[i] - clf.feat_mean[i];
      clf.feat_std[i] += d * d;
    }
  for (auto& v : clf.feat_std) {
    v = std::sqrt(v / static_cast<double>(train_x.size()));
    if (v == 0.0) v = 1.0;  // degenerate feature dimension
  }

  clf.weights.assign(static_cast<size_t>(n_classes), std::vector<double>(dim, 0.0));
  clf.bias.assign(static_cast<size_t>(n_classes), 0.0);

  // pre-normalized training matrix
  std::vector<std::vector<double>> zx(train_x.size());
  for (size_t i = 0; i < train_x.size(); ++i) zx[i] = zscore(clf, train_x[i]);

  // flat Adam over (weights | bias)
  const size_t n_params = static_cast<size_t>(n_classes) * (dim + 1);
  std::vector<double> m(n_params, 0.0), v(n_params, 0.0), g(n_params, 0.0);
  int64_t step = 0;

  auto val_loss = [&]() {
    double acc = 0.0;
    for (size_t i = 0; i < val_x.size(); ++i) acc += cross_entropy(clf.logits(val_x[i]), val_y[i]);
    return val_x.empty() ? 0.0 : acc / static_cast<double>(val_x.size());
  };

  Rng rng(opts.seed);
  std::vector<size_t> order(zx.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double best_val = std::numeric_limits<double>::infinity();
  auto best_weights = clf.weights;
  auto best_bias = clf.bias;
  int64_t since_best = 0;

  std::vector<double> masked(dim), probs(static_cast<size_t>(n_classes));
  const double keep = 1.0 - opts.dropout;

  for (int64_t epoch = 0; epoch < opts.max_epochs; ++epoch) {
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(opts.batch_size)) {
      const size_t end = std::min(order.size(), pos + static_cast<size_t>(opts.batch_size));
      std::fill(g.begin(), g.end(), 0.0);
      for (size_t bi = pos; bi < end; ++bi) {
        const auto& x = zx[order[bi]];
        const int label = train_y[order[bi]];
        // inverted input dropout
        for (size_t i = 0; i < dim; ++i)
          masked[i] = rng.uniform() < opts.dropout ? 0.0 : x[i] / keep;

        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t c = 0; c < n_classes; ++c) {
          double acc = clf.bias[static_cast<size_t>(c)];
          const auto& w = clf.weights[static_cast<size_t>(c)];
          for (size_t i = 0; i < dim; ++i) acc += w[i] * masked[i];
          probs[static_cast<size_t>(c)] = acc;
          mx = std::max(mx, acc);
        }
        double sum = 0.0;
        for (auto& p : probs) {
          p = std::exp(p - mx);
          sum += p;
        }
        for (auto& p : probs) p /= sum;

        for (int64_t c = 0; c < n_classes; ++c) {
          const double err = probs[static_cast<size_t>(c)] - (c == label ? 1.0 : 0.0);
          double* gw = g.data() + static_cast<size_t>(c) * (dim + 1);
          for (size_t i = 0; i < dim; ++i) gw[i] += err * masked[i];
          gw[dim] += err;
        }
      }
      const double scale = 1.0 / static_cast<double>(end - pos);
      ++step;
      const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step));
      for (int64_t c = 0; c < n_classes; ++c) {
        double* gw = g.data() + static_cast<size_t>(c) * (dim + 1);
        double* mm = m.data() + static_cast<size_t>(c) * (dim + 1);
        double* vv = v.data() + static_cast<size_t>(c) * (dim + 1);
        auto& w = clf.weights[static_cast<size_t>(c)];
        for (size_t i = 0; i <= dim; ++i) {
          const double gi = gw[i] * scale;
          mm[i] = 0.9 * mm[i] + 0.1 * gi;
          vv[i] = 0.999 * vv[i] + 0.001 * gi * gi;
          const double upd = opts.lr * (mm[i] / bc1) / (std::sqrt(vv[i] / bc2) + 1e-8);
          if (i < dim)
            w[i] -= upd;
          else
            clf.bias[static_cast<size_t>(c)] -= upd;
        }
      }
    }

    const double vl = val_loss();
    if (vl < best_val) {
      best_val = vl;
      best_weights = clf.weights;
      best_bias = clf.bias;
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  clf.weights = std::move(best_weights);
  clf.bias = std::move(best_bias);
  return clf;
}

double classifier_accuracy(const SpoofClassifier& clf, const std::vector<std::vector<double>>& x,
                           const std::vector<int>& y) {
  if (x.empty()) return 0.0;
  int64_t hits = 0;
  for (size_t i = 0; i < x.size(); ++i)
    if (clf.predict(x[i]) == y[i]) ++hits;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(x.size());
}

FeatureSet corpus_features(const Corpus& corpus, Split split, const std::string& cache_path) {
  std::map<std::string, std::vector<double>> cache;
  bool cache_dirty = false;
  if (!cache_path.empty() && fs::exists(cache_path)) {
    for (auto& t : read_blob_file(cache_path).tensors)
      cache.emplace(t.name, std::vector<double>(t.data.begin(), t.data.end()));
  }

  FeatureSet out;
  for (const int64_t ui : corpus.utterances_of(split)) {
    const auto& u = corpus.utterances[static_cast<size_t>(ui)];
    const auto it = cache.find(u.path);
    if (it != cache.end() && static_cast<int64_t>(it->second.size()) == kFeatureDim) {
      out.x.push_back(it->second);
    } else {
      out.x.push_back(mfcc_features(read_wav(u.path)));
      if (!cache_path.empty()) {
        cache[u.path] = out.x.back();
        cache_dirty = true;
      }
    }
    out.y.push_back(u.speaker);
    out.paths.push_back(u.path);
  }

  if (cache_dirty) {
    std::vector<NamedTensor> tensors;
    for (const auto& [path, feat] : cache)
      tensors.push_back({path, {static_cast<int64_t>(feat.size())},
                         std::vector<float>(feat.begin(), feat.end())});
    write_blob_file(cache_path, "{\"kind\":\"mfcc_feature_cache\"}", tensors);
  }
  return out;
}

SpoofClassifier train_spoof_classifier(const Corpus& corpus, const ClassifierOptions& opts,
                                       const std::string& feature_cache) {
  if (corpus.speaker_names.size() < 2)
    throw ConfigError("spoof classifier needs at least 2 speakers, corpus has " +
                      std::to_string(corpus.speaker_names.size()));
  const auto train_set = corpus_features(corpus, Split::train, feature_cache);
  const auto val_set = corpus_features(corpus, Split::validation, feature_cache);
  return train_linear_classifier(train_set.x, train_set.y, val_set.x, val_set.y,
                                 static_cast<int64_t>(corpus.speaker_names.size()), opts);
}

SpoofingResult spoofing_rate(const SpoofClassifier& clf, const std::string& manifest_path,
                             const std::vector<std::string>& speaker_names) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open conversion manifest " + manifest_path);

  auto speaker_id = [&](const std::string& name) {
    for (size_t i = 0; i < speaker_names.size(); ++i)
      if (speaker_names[i] == name) return static_cast<int>(i);
    return -1;
  };

  SpoofingResult result;
  int64_t hits = 0;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cols;
    size_t start = 0;
    for (size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        cols.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    if (cols.size() != 4) throw FormatError("conversion manifest row needs 4 columns: " + line);
    const std::string& output = cols[3];
    const int tgt = speaker_id(cols[2]);
    if (tgt < 0) throw ConfigError("manifest target '" + cols[2] + "' unknown to the classifier corpus");
    if (!fs::exists(output)) {
      result.missing.push_back(output);
      continue;
    }
    const auto features = mfcc_features(read_wav(output));
    if (clf.predict(features) == tgt) ++hits;
    result.scored += 1;
  }
  result.rate_pct = result.scored == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(result.scored);
  return result;
}

namespace {

// Evenly strided subsample keeping the index order deterministic.
std::vector<size_t> strided_subset(size_t n, int64_t cap) {
  std::vector<size_t> keep;
  if (cap <= 0 || static_cast<int64_t>(n) <= cap) {
    keep.resize(n);
    for (size_t i = 0; i < n; ++i) keep[i] = i;
    return keep;
  }
  const double stride = static_cast<double>(n) / static_cast<double>(cap);
  for (int64_t i = 0; i < cap; ++i) keep.push_back(static_cast<size_t>(i * stride));
  return keep;
}

void latent_features(FlowModel<float>& model, const Corpus& corpus, const FrameIndex& idx,
                     int64_t cap, std::vector<std::vector<double>>* x, std::vector<int>* y) {
  const int64_t fs = idx.frame_size;
  const auto keep = strided_subset(idx.entries.size(), cap);

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

  for (size_t pos = 0; pos < keep.size();) {
    const int64_t b = std::min<int64_t>(32, static_cast<int64_t>(keep.size() - pos));
    Tensor3f frames(b, 1, fs);
    std::vector<int> spk(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
      const auto& e = idx.entries[keep[pos + static_cast<size_t>(i)]];
      const auto& samples = load(e.utterance);
      std::copy(samples.begin() + e.start, samples.begin() + e.start + fs, frames.row(i, 0));
      spk[static_cast<size_t>(i)] = corpus.utterances[static_cast<size_t>(e.utterance)].speaker;
    }
    const auto fr = model.forward(frames, spk);
    for (int64_t i = 0; i < b; ++i) {
      std::vector<double> z(static_cast<size_t>(fs));
      int64_t j = 0;
      for (int64_t c = 0; c < fr.z.channels(); ++c) {
        const float* row = fr.z.row(i, c);
        for (int64_t t = 0; t < fr.z.time(); ++t) z[static_cast<size_t>(j++)] = row[t];
      }
      x->push_back(std::move(z));
      y->push_back(spk[static_cast<size_t>(i)]);
    }
    pos += static_cast<size_t>(b);
  }
}

}  // namespace

ProbeResult latent_probe(FlowModel<float>& model, const Corpus& corpus, const FrameIndex& train_idx,
                         const FrameIndex& val_idx, const FrameIndex& test_idx,
                         const ClassifierOptions& opts, int64_t max_train_frames,
                         int64_t max_eval_frames) {
  std::vector<std::vector<double>> train_x, val_x, test_x;
  std::vector<int> train_y, val_y, test_y;
  latent_features(model, corpus, train_idx, max_train_frames, &train_x, &train_y);
  latent_features(model, corpus, val_idx, max_eval_frames, &val_x, &val_y);
  latent_features(model, corpus, test_idx, max_eval_frames, &test_x, &test_y);

  const int64_t n_classes = static_cast<int64_t>(corpus.speaker_names.size());
  const auto clf = train_linear_classifier(train_x, train_y, val_x, val_y, n_classes, opts);

  ProbeResult res;
  res.accuracy_pct = classifier_accuracy(clf, test_x, test_y);
  res.chance_pct = 100.0 / static_cast<double>(n_classes);
  res.train_count = static_cast<int64_t>(train_x.size());
  res.test_count = static_cast<int64_t>(test_x.size());
  return res;
}

}  // namespace voxflow
