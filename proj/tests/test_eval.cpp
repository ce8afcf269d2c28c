#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "voxflow/classifier.hpp"
#include "voxflow/toygen.hpp"
#include "voxflow/trainer.hpp"

using namespace voxflow;
namespace fs = std::filesystem;

namespace {

Waveform tone(double freq, double seconds = 1.0, double phase = 0.0, double amp = 0.8) {
  Waveform w;
  const int64_t n = static_cast<int64_t>(seconds * 16000);
  w.samples.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    w.samples[static_cast<size_t>(i)] =
        static_cast<float>(amp * std::sin(2.0 * 3.14159265358979 * freq * double(i) / 16000.0 + phase));
  return w;
}

double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

struct EvalCorpus {
  Corpus corpus;
  FrameIndex train_idx, val_idx, test_idx;
};

const EvalCorpus& eval_corpus() {
  static EvalCorpus ec = [] {
    EvalCorpus e;
    const auto d = fs::temp_directory_path() / "voxflow_eval_corpus";
    fs::remove_all(d);
    ToyCorpusConfig cfg;
    cfg.n_speakers = 2;
    cfg.minutes_per_speaker = 1.0;  // 30 utterances each
    cfg.utterance_seconds = 2.0;
    cfg.seed = 11;
    generate_toy_corpus(d.string(), cfg);
    e.corpus = split_corpus(build_corpus(d.string()), 0.15, 0.15, 2);
    e.train_idx = index_frames(e.corpus, Split::train, 512);
    e.val_idx = index_frames(e.corpus, Split::validation, 512);
    e.test_idx = index_frames(e.corpus, Split::test, 512);
    return e;
  }();
  return ec;
}

}  // namespace

TEST_CASE("fft_radix2 matches a naive DFT") {
  Rng rng(1);
  const size_t n = 64;
  std::vector<std::complex<double>> a(n);
  for (auto& v : a) v = {rng.normal(), rng.normal()};
  auto fft = a;
  fft_radix2(fft);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> acc{0, 0};
    for (size_t i = 0; i < n; ++i) {
      const double ph = -2.0 * 3.14159265358979323846 * double(k) * double(i) / double(n);
      acc += a[i] * std::complex<double>(std::cos(ph), std::sin(ph));
    }
    CHECK(std::abs(fft[k] - acc) < 1e-9);
  }
}

TEST_CASE("mfcc features: length, silence, tone separation, flip insensitivity") {
  // silence: log-mel pinned at the floor, so per-frame features are constant
  // and every std entry is zero
  Waveform silence;
  silence.samples.assign(8000, 0.0f);
  const auto fs = mfcc_features(silence);
  REQUIRE(static_cast<int64_t>(fs.size()) == kFeatureDim);
  // identical frames: any nonzero std is mean-rounding noise
  for (size_t i = 121; i < 242; ++i) CHECK(std::abs(fs[i]) < 1e-9);

  const auto f440 = mfcc_features(tone(440.0));
  const auto f3k = mfcc_features(tone(3000.0));
  const auto f440_phase = mfcc_features(tone(440.0, 1.0, 1.1));
  REQUIRE(f440.size() == 242);
  const double cross = euclid(f440, f3k);
  const double same = euclid(f440, f440_phase);
  CHECK(cross > 0.0);
  CHECK(cross > same);

  // sign flip leaves the magnitude spectrum untouched
  auto flipped = tone(440.0);
  for (auto& v : flipped.samples) v = -v;
  CHECK(euclid(f440, mfcc_features(flipped)) < 1e-6);

  // shorter than one analysis window
  Waveform tiny;
  tiny.samples.assign(100, 0.1f);
  CHECK_THROWS_AS(mfcc_features(tiny), ShapeError);
}

TEST_CASE("spoof classifier: toy corpus accuracy and determinism") {
  const auto& ec = eval_corpus();
  const auto clf = train_spoof_classifier(ec.corpus);

  const auto test_set = corpus_features(ec.corpus, Split::test);
  REQUIRE(!test_set.x.empty());
  const double acc = classifier_accuracy(clf, test_set.x, test_set.y);
  CHECK(acc >= 95.0);

  const auto clf2 = train_spoof_classifier(ec.corpus);
  CHECK(clf.weights == clf2.weights);
  CHECK(clf.bias == clf2.bias);
}

TEST_CASE("classifier rejects single-speaker training") {
  CHECK_THROWS_AS(train_linear_classifier({{1.0, 2.0}}, {0}, {}, {}, 1), ConfigError);
}

TEST_CASE("zero-variance feature dimensions are clamped, not fatal") {
  std::vector<std::vector<double>> x = {{1.0, 5.0}, {2.0, 5.0}, {3.0, 5.0}, {4.0, 5.0}};
  std::vector<int> y = {0, 0, 1, 1};
  const auto clf = train_linear_classifier(x, y, x, y, 2);
  CHECK(clf.feat_std[1] == 1.0);
  CHECK(classifier_accuracy(clf, x, y) == 100.0);
}

TEST_CASE("spoofing_rate: target audio scores high, manual count agrees, missing reported") {
  const auto& ec = eval_corpus();
  const auto clf = train_spoof_classifier(ec.corpus);

  // build a manifest whose "conversions" are genuine target-speaker files
  const auto dir = fs::temp_directory_path() / "voxflow_eval_manifest";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto manifest = (dir / "conv.csv").string();
  {
    std::ofstream out(manifest);
    out << "input,src,tgt,output\n";
    int rows = 0;
    for (const int64_t ui : ec.corpus.utterances_of(Split::test)) {
      const auto& u = ec.corpus.utterances[static_cast<size_t>(ui)];
      out << "unused.wav," << (u.speaker == 0 ? "spk_b" : "spk_a") << ','
          << ec.corpus.speaker_names[static_cast<size_t>(u.speaker)] << ',' << u.path << '\n';
      if (++rows == 8) break;
    }
    out << "unused.wav,spk_a,spk_b," << (dir / "does_not_exist.wav").string() << '\n';
  }

  const auto res = spoofing_rate(clf, manifest, ec.corpus.speaker_names);
  CHECK(res.scored == 8);
  CHECK(res.missing.size() == 1);
  CHECK(res.rate_pct >= 95.0);  // real target audio fools nobody

  // manual agreement on the definition: hits / scored * 100
  int hits = 0;
  int scored = 0;
  for (const int64_t ui : ec.corpus.utterances_of(Split::test)) {
    const auto& u = ec.corpus.utterances[static_cast<size_t>(ui)];
    if (clf.predict(mfcc_features(read_wav(u.path))) == u.speaker) ++hits;
    if (++scored == 8) break;
  }
  CHECK(res.rate_pct == doctest::Approx(100.0 * hits / 8.0));
}

TEST_CASE("latent probe: chance baseline and identity-model sanity") {
  const auto& ec = eval_corpus();
  FlowConfig cfg;
  cfg.n_blocks = 2;
  cfg.n_flows_per_block = 2;
  cfg.frame_size = 512;
  cfg.coupling_hidden_channels = 8;
  cfg.embedding_dim = 8;
  cfg.n_speakers = 2;
  FlowModel<float> model(cfg);
  model.init_identity();

  ClassifierOptions opts;
  opts.max_epochs = 40;
  const auto probe = latent_probe(model, ec.corpus, ec.train_idx, ec.val_idx, ec.test_idx, opts,
                                  600, 200);
  CHECK(probe.chance_pct == 50.0);
  CHECK(probe.accuracy_pct >= 0.0);
  CHECK(probe.accuracy_pct <= 100.0);
  CHECK(probe.train_count == 600);
}
