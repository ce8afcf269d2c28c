// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "voxflow/errors.hpp"

namespace fs = std::filesystem;

namespace voxflow {

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
    default: return "unassigned";
  }
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  if (name == "unassigned") return Split::unassigned;
  throw FormatError("unknown split name '" + name + "'");
}

std::string BuildReport::to_string() const {
  std::ostringstream os;
  os << "valid utterances: " << valid << "\n";
  os << "skipped files: " << skipped.size() << "\n";
  for (const auto& s : skipped) os << "  " << s << "\n";
  return os.str();
}

int Corpus::speaker_id(const std::string& name) const {
  const auto it = std::find(speaker_names.begin(), speaker_names.end(), name);
  return it == speaker_names.end() ? -1 : static_cast<int>(it - speaker_names.begin());
}

std::vector<int64_t> Corpus::utterances_of(Split s) const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < utterances.size(); ++i)
    if (utterances[i].split == s) out.push_back(static_cast<int64_t>(i));
  return out;
}

std::string normalize_sentence(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (const char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(u)));
    } else if (std::isspace(u)) {
      pending_space = true;
    }
    // punctuation dropped
  }
  return out;
}

namespace {

std::string read_sidecar(const fs::path& wav_path) {
  fs::path txt = wav_path;
  txt.replace_extension(".txt");
  std::ifstream in(txt);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Corpus build_corpus(const std::string& root) {
  if (!fs::is_directory(root)) throw ConfigError("corpus root '" + root + "' is not a directory");

  std::vector<std::string> speaker_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) speaker_dirs.push_back(e.path().filename().string());
  std::sort(speaker_dirs.begin(), speaker_dirs.end());

  Corpus c;
  for (const auto& spk : speaker_dirs) {
    std::vector<fs::path> wavs;
    for (const auto& e : fs::directory_iterator(fs::path(root) / spk))
      if (e.is_regular_file() && e.path().extension() == ".wav") wavs.push_back(e.path());
    std::sort(wavs.begin(), wavs.end());
    if (wavs.empty()) continue;

    const int sid = static_cast<int>(c.speaker_names.size());
    bool any_valid = false;
    for (const auto& p : wavs) {
      try {
        const Waveform w = read_wav(p.string());
        if (w.samples.empty()) {
          c.report.skipped.push_back(p.string() + ": empty audio");
          continue;
        }
      } catch (const Error& e) {
        c.report.skipped.push_back(p.string() + ": " + e.what());
        continue;
      }
      Utterance u;
      u.path = p.string();
      u.speaker = sid;
      const std::string text = read_sidecar(p);
      u.sentence_key = text.empty() ? p.stem().string() : normalize_sentence(text);
      c.utterances.push_back(std::move(u));
      c.report.valid += 1;
      any_valid = true;
    }
    if (any_valid) c.speaker_names.push_back(spk);
  }
  if (c.report.valid == 0) throw ConfigError("no valid utterances under '" + root + "'");
  return c;
}

Corpus split_corpus(const Corpus& c, double val_frac, double test_frac, uint64_t seed) {
  if (val_frac <= 0 || val_frac >= 1 || test_frac <= 0 || test_frac >= 1 || val_frac + test_frac >= 1)
    throw ConfigError("split fractions must lie in (0,1) and sum below 1");

  std::set<std::string> key_set;
  for (const auto& u : c.utterances) key_set.insert(u.sentence_key);
  std::vector<std::string> keys(key_set.begin(), key_set.end());
  const int64_t k = static_cast<int64_t>(keys.size());
  if (k < 3) throw ConfigError("split error: need at least 3 distinct sentence keys, got " + std::to_string(k));

  Rng rng(seed);
  rng.shuffle(keys);

  const int64_t n_val = std::max<int64_t>(1, std::llround(val_frac * static_cast<double>(k)));
  const int64_t n_test = std::max<int64_t>(1, std::llround(test_frac * static_cast<double>(k)));

  std::map<std::string, Split> assign;
  for (int64_t i = 0; i < k; ++i) {
    Split s = Split::train;
    if (i < n_val)
      s = Split::validation;
    else if (i < n_val + n_test)
      s = Split::test;
    assign[keys[static_cast<size_t>(i)]] = s;
  }

  Corpus out = c;
  for (auto& u : out.utterances) u.split = assign.at(u.sentence_key);

  // sentence-disjointness is structural here; re-assert it anyway
  std::map<std::string, Split> seen;
  for (const auto& u : out.utterances) {
    const auto it = seen.find(u.sentence_key);
    if (it != seen.end() && it->second != u.split)
      throw StateError("sentence key '" + u.sentence_key + "' crosses splits");
    seen[u.sentence_key] = u.split;
  }
  return out;
}

void save_manifest(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  for (const auto& u : c.utterances) {
    if (u.speaker < 0) continue;
    out << u.path << '\t' << c.speaker_names[static_cast<size_t>(u.speaker)] << '\t'
        << split_name(u.split) << '\n';
  }
  if (!out) throw IoError("manifest write failed for " + path);
}

Corpus load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);

  struct Row {
    std::string path, speaker, split;
  };
  std::vector<Row> rows;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw FormatError("manifest line " + std::to_string(lineno) + " is not path<TAB>speaker<TAB>split");
    rows.push_back({line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)});
  }
  if (rows.empty()) throw FormatError("manifest " + path + " is empty");

  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.speaker);

  Corpus c;
  c.speaker_names.assign(names.begin(), names.end());
  for (const auto& r : rows) {
    Utterance u;
    u.path = r.path;
    u.speaker = c.speaker_id(r.speaker);
    u.sentence_key = fs::path(r.path).stem().string();
    u.split = split_from_name(r.split);
    c.utterances.push_back(std::move(u));
  }
  c.report.valid = static_cast<int64_t>(c.utterances.size());
  return c;
}

FrameIndex index_frames(const Corpus& c, Split split, int64_t frame_size) {
  FrameIndex idx;
  idx.split = split;
  idx.frame_size = frame_size;
  idx.utterance_peak.assign(c.utterances.size(), 0.0f);

  for (const int64_t ui : c.utterances_of(split)) {
    const Waveform raw = read_wav(c.utterances[static_cast<size_t>(ui)].path);
    float peak = 0.0f;
    for (const float v : raw.samples) peak = std::max(peak, std::abs(v));
    idx.utterance_peak[static_cast<size_t>(ui)] = peak;

    int64_t kept = 0;
    if (peak > 0.0f) {
      std::vector<float> norm(raw.samples.size());
      for (size_t i = 0; i < norm.size(); ++i) norm[i] = raw.samples[i] / peak;
      for (const int64_t s :
           frame_starts(static_cast<int64_t>(norm.size()), frame_size, frame_size)) {
        if (!is_silent(std::span<const float>(norm.data() + s, static_cast<size_t>(frame_size)))) {
          idx.entries.push_back({ui, s});
          ++kept;
        }
      }
    }
    if (kept == 0) idx.empty_utterances.push_back(ui);
  }
  return idx;
}

BatchIterator::BatchIterator(const Corpus& corpus, const FrameIndex& index, int64_t batch_size,
                             AugmentConfig augment_cfg, bool augment_enabled, uint64_t seed)
    : corpus_(corpus),
      index_(index),
      batch_size_(batch_size),
      cfg_(augment_cfg),
      augment_(augment_enabled),
      rng_(seed) {
  if (batch_size <= 0) throw ConfigError("batch_size must be > 0");
  if (index.entries.empty()) throw StateError("frame index for " + split_name(index.split) + " is empty");
  order_.resize(index.entries.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int64_t>(i);
}

const Waveform& BatchIterator::waveform(int64_t utt) {
  auto it = cache_.find(utt);
  if (it != cache_.end()) return it->second;

  Waveform w = read_wav(corpus_.utterances[static_cast<size_t>(utt)].path);
  const float peak = index_.utterance_peak[static_cast<size_t>(utt)];
  if (peak > 0.0f)
    for (float& v : w.samples) v /= peak;

  cache_samples_ += static_cast<int64_t>(w.samples.size());
  cache_fifo_.push_back(utt);
  while (cache_samples_ > kCacheBudgetSamples && cache_fifo_.size() > 1) {
    const int64_t victim = cache_fifo_.front();
    cache_fifo_.erase(cache_fifo_.begin());
    auto vit = cache_.find(victim);
    if (vit != cache_.end()) {
      cache_samples_ -= static_cast<int64_t>(vit->second.samples.size());
      cache_.erase(vit);
    }
  }
  return cache_.emplace(utt, std::move(w)).first->second;
}

FrameBatch BatchIterator::next() {
  if (cursor_ == 0) {
    // shuffle from the canonical order so the permutation is a pure
    // function of the rng state (exact resume relies on this)
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int64_t>(i);
    rng_.shuffle(order_);
  }

  const int64_t remaining = static_cast<int64_t>(order_.size()) - cursor_;
  const int64_t b = std::min(batch_size_, remaining);

  FrameBatch batch;
  batch.frames = Tensor3f(b, 1, index_.frame_size);
  batch.speakers.resize(static_cast<size_t>(b));
  batch.short_batch = b < batch_size_;

  for (int64_t i = 0; i < b; ++i) {
    const auto& entry = index_.entries[static_cast<size_t>(order_[static_cast<size_t>(cursor_ + i)])];
    const Waveform& w = waveform(entry.utterance);
    std::vector<float> frame;
    if (augment_) {
      frame = augment(w, entry.start, index_.frame_size, cfg_, rng_);
    } else {
      frame.assign(w.samples.begin() + entry.start, w.samples.begin() + entry.start + index_.frame_size);
    }
    std::copy(frame.begin(), frame.end(), batch.frames.row(i, 0));
    batch.speakers[static_cast<size_t>(i)] = corpus_.utterances[static_cast<size_t>(entry.utterance)].speaker;
  }

  cursor_ += b;
  if (cursor_ >= static_cast<int64_t>(order_.size())) {
    batch.epoch_end = true;
    cursor_ = 0;
  }
  return batch;
}

}  // namespace voxflow
