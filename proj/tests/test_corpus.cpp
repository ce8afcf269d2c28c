#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "voxflow/corpus.hpp"
#include "voxflow/errors.hpp"
#include "voxflow/toygen.hpp"

using namespace voxflow;
namespace fs = std::filesystem;

namespace {

// A tiny corpus shared by the cases below: 2 speakers x 6 utterances of 2 s.
const std::string& tiny_corpus_dir() {
  static std::string dir = [] {
    const auto d = fs::temp_directory_path() / "voxflow_corpus_test";
    fs::remove_all(d);
    ToyCorpusConfig cfg;
    cfg.n_speakers = 2;
    cfg.minutes_per_speaker = 0.2;  // 6 utterances of ~2 s
    cfg.utterance_seconds = 2.0;
    cfg.seed = 99;
    generate_toy_corpus(d.string(), cfg);
    return d.string();
  }();
  return dir;
}

}  // namespace

TEST_CASE("build_corpus finds speakers and utterances") {
  const auto c = build_corpus(tiny_corpus_dir());
  CHECK(c.speaker_names.size() == 2);
  CHECK(c.speaker_names[0] == "spk_a");
  CHECK(c.speaker_names[1] == "spk_b");
  CHECK(c.utterances.size() == 12);
  for (const auto& u : c.utterances) {
    CHECK(u.speaker >= 0);
    CHECK(u.speaker < 2);
  }
}

TEST_CASE("sidecar text gives shared sentence keys across speakers") {
  const auto c = build_corpus(tiny_corpus_dir());
  std::map<std::string, std::set<int>> by_key;
  for (const auto& u : c.utterances) by_key[u.sentence_key].insert(u.speaker);
  // toy generator reuses sentence texts across speakers
  bool any_shared = false;
  for (const auto& [k, spk] : by_key)
    if (spk.size() == 2) any_shared = true;
  CHECK(any_shared);
  CHECK(normalize_sentence("Toy sentence number 3.") == "toy sentence number 3");
  CHECK(normalize_sentence("  Hello,   WORLD!! ") == "hello world");
}

TEST_CASE("build_corpus reports unreadable files") {
  const auto dir = fs::temp_directory_path() / "voxflow_corpus_bad";
  fs::remove_all(dir);
  fs::create_directories(dir / "spk_x");
  {
    std::ofstream bad(dir / "spk_x" / "bad.wav");
    bad << "this is not a wav";
  }
  Waveform ok;
  ok.samples.assign(4000, 0.25f);
  write_wav((dir / "spk_x" / "ok.wav").string(), ok);

  const auto c = build_corpus(dir.string());
  CHECK(c.report.valid == 1);
  CHECK(c.report.skipped.size() == 1);
  CHECK(c.report.skipped[0].find("bad.wav") != std::string::npos);

  fs::remove_all(dir / "spk_x");
  fs::create_directories(dir / "spk_x");
  CHECK_THROWS_AS(build_corpus(dir.string()), ConfigError);
}

TEST_CASE("split_corpus: sentence-disjoint, deterministic, 8/1/1 on 10 keys") {
  const auto c = build_corpus(tiny_corpus_dir());
  // 6 shared sentence keys in the tiny corpus; synthesize a 10-key corpus
  Corpus ten = c;
  ten.utterances.clear();
  for (int i = 0; i < 10; ++i) {
    Utterance u;
    u.path = "u" + std::to_string(i) + ".wav";
    u.speaker = i % 2;
    u.sentence_key = "key" + std::to_string(i);
    ten.utterances.push_back(u);
  }
  const auto split = split_corpus(ten, 0.1, 0.1, 7);
  std::map<Split, int> counts;
  for (const auto& u : split.utterances) counts[u.split] += 1;
  CHECK(counts[Split::train] == 8);
  CHECK(counts[Split::validation] == 1);
  CHECK(counts[Split::test] == 1);

  const auto again = split_corpus(ten, 0.1, 0.1, 7);
  for (size_t i = 0; i < split.utterances.size(); ++i)
    CHECK(split.utterances[i].split == again.utterances[i].split);

  const auto other = split_corpus(ten, 0.1, 0.1, 8);
  bool any_differs = false;
  for (size_t i = 0; i < split.utterances.size(); ++i)
    if (split.utterances[i].split != other.utterances[i].split) any_differs = true;
  CHECK(any_differs);
}

TEST_CASE("split_corpus keeps sentence keys within one split") {
  const auto c = split_corpus(build_corpus(tiny_corpus_dir()), 0.2, 0.2, 3);
  std::map<std::string, std::set<Split>> seen;
  for (const auto& u : c.utterances) seen[u.sentence_key].insert(u.split);
  for (const auto& [k, splits] : seen) CHECK(splits.size() == 1);
}

TEST_CASE("split_corpus rejects degenerate inputs") {
  auto c = build_corpus(tiny_corpus_dir());
  CHECK_THROWS_AS(split_corpus(c, 0.0, 0.1, 1), ConfigError);
  CHECK_THROWS_AS(split_corpus(c, 0.6, 0.5, 1), ConfigError);

  Corpus two = c;
  two.utterances.resize(2);
  two.utterances[0].sentence_key = "a";
  two.utterances[1].sentence_key = "b";
  CHECK_THROWS_AS(split_corpus(two, 0.1, 0.1, 1), ConfigError);
}

TEST_CASE("108 speaker directories get dense ids 0..107") {
  const auto dir = fs::temp_directory_path() / "voxflow_corpus_many";
  fs::remove_all(dir);
  Waveform w;
  w.samples.assign(800, 0.3f);
  for (int i = 0; i < 108; ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "p%03d", 225 + i);
    fs::create_directories(dir / name);
    write_wav((dir / name / "utt.wav").string(), w);
  }
  const auto c = build_corpus(dir.string());
  REQUIRE(c.speaker_names.size() == 108);
  std::set<int> ids;
  for (const auto& u : c.utterances) ids.insert(u.speaker);
  CHECK(ids.size() == 108);
  CHECK(*ids.begin() == 0);
  CHECK(*ids.rbegin() == 107);
  fs::remove_all(dir);
}

TEST_CASE("manifest round trip") {
  const auto c = split_corpus(build_corpus(tiny_corpus_dir()), 0.2, 0.2, 3);
  const auto path = (fs::temp_directory_path() / "voxflow_corpus_test_manifest.tsv").string();
  save_manifest(c, path);
  const auto r = load_manifest(path);
  CHECK(r.speaker_names == c.speaker_names);
  REQUIRE(r.utterances.size() == c.utterances.size());
  for (size_t i = 0; i < r.utterances.size(); ++i) {
    CHECK(r.utterances[i].path == c.utterances[i].path);
    CHECK(r.utterances[i].speaker == c.utterances[i].speaker);
    CHECK(r.utterances[i].split == c.utterances[i].split);
  }
}

TEST_CASE("index_frames: silence dropped, arithmetic for a 1 s sine") {
  const auto dir = fs::temp_directory_path() / "voxflow_corpus_sine";
  fs::remove_all(dir);
  fs::create_directories(dir / "spk_a");

  Waveform silence;
  silence.samples.assign(16000, 0.0f);
  write_wav((dir / "spk_a" / "silence.wav").string(), silence);

  Waveform sine;
  sine.samples.resize(16000);
  for (size_t i = 0; i < sine.samples.size(); ++i)
    sine.samples[i] = static_cast<float>(0.9 * std::sin(2.0 * 3.14159265358979 * 220.0 * double(i) / 16000.0));
  write_wav((dir / "spk_a" / "sine.wav").string(), sine);

  auto c = build_corpus(dir.string());
  for (auto& u : c.utterances) u.split = Split::train;

  const auto idx = index_frames(c, Split::train, 4096);
  // sine: floor(16000/4096) = 3 frames, all voiced; silence: 0 frames
  CHECK(idx.entries.size() == 3);
  CHECK(idx.empty_utterances.size() == 1);
  for (const auto& e : idx.entries) CHECK(c.utterances[size_t(e.utterance)].path.find("sine") != std::string::npos);

  const auto again = index_frames(c, Split::train, 4096);
  CHECK(again.entries.size() == idx.entries.size());
}

TEST_CASE("batch iterator: permutation epochs, valid speakers, determinism") {
  auto c = build_corpus(tiny_corpus_dir());
  for (auto& u : c.utterances) u.split = Split::train;
  const auto idx = index_frames(c, Split::train, 512);
  REQUIRE(!idx.entries.empty());

  // one epoch touches every entry exactly once
  BatchIterator it(c, idx, 4, AugmentConfig::disabled(), false, 42);
  std::multiset<std::pair<int64_t, int64_t>> seen;
  int64_t total = 0;
  bool done = false;
  while (!done) {
    const auto b = it.next();
    total += b.frames.batch();
    for (int64_t i = 0; i < b.frames.batch(); ++i) {
      CHECK(b.speakers[size_t(i)] >= 0);
      CHECK(b.speakers[size_t(i)] < 2);
    }
    done = b.epoch_end;
  }
  CHECK(total == int64_t(idx.entries.size()));

  // with augmentation off and a fixed seed, two epochs yield the same frame multiset
  auto frame_hash = [](const FrameBatch& b) {
    std::vector<uint64_t> hashes;
    for (int64_t i = 0; i < b.frames.batch(); ++i) {
      uint64_t h = 1469598103934665603ull;
      const float* row = b.frames.row(i, 0);
      for (int64_t t = 0; t < b.frames.time(); ++t) {
        uint32_t bits;
        std::memcpy(&bits, &row[t], 4);
        h = (h ^ bits) * 1099511628211ull;
      }
      hashes.push_back(h);
    }
    return hashes;
  };
  std::multiset<uint64_t> epoch1, epoch2;
  done = false;
  while (!done) {
    const auto b = it.next();
    for (const auto h : frame_hash(b)) epoch1.insert(h);
    done = b.epoch_end;
  }
  done = false;
  while (!done) {
    const auto b = it.next();
    for (const auto h : frame_hash(b)) epoch2.insert(h);
    done = b.epoch_end;
  }
  CHECK(epoch1 == epoch2);

  // short final batch is flagged
  BatchIterator it2(c, idx, int64_t(idx.entries.size()) + 5, AugmentConfig::disabled(), false, 1);
  const auto big = it2.next();
  CHECK(big.short_batch);
  CHECK(big.epoch_end);
  CHECK(big.frames.batch() == int64_t(idx.entries.size()));
}
