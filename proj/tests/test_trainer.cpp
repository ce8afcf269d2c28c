#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "voxflow/checkpoint.hpp"
#include "voxflow/toygen.hpp"
#include "voxflow/trainer.hpp"

using namespace voxflow;
namespace fs = std::filesystem;

namespace {

FlowConfig micro_config(int n_speakers = 2) {
  FlowConfig cfg;
  cfg.n_blocks = 2;
  cfg.n_flows_per_block = 2;
  cfg.frame_size = 256;
  cfg.coupling_hidden_channels = 12;
  cfg.embedding_dim = 8;
  cfg.n_speakers = n_speakers;
  return cfg;
}

struct MicroCorpus {
  std::string dir;
  Corpus corpus;
  FrameIndex train_idx, val_idx;
};

const MicroCorpus& micro_corpus() {
  static MicroCorpus mc = [] {
    MicroCorpus m;
    const auto d = fs::temp_directory_path() / "voxflow_trainer_corpus";
    fs::remove_all(d);
    ToyCorpusConfig cfg;
    cfg.n_speakers = 2;
    cfg.minutes_per_speaker = 0.5;
    cfg.utterance_seconds = 2.0;
    cfg.seed = 77;
    generate_toy_corpus(d.string(), cfg);
    m.dir = d.string();
    m.corpus = split_corpus(build_corpus(m.dir), 0.15, 0.15, 5);
    m.train_idx = index_frames(m.corpus, Split::train, 256);
    m.val_idx = index_frames(m.corpus, Split::validation, 256);
    return m;
  }();
  return mc;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("anneal schedule: one anneal after exactly 10 flat epochs") {
  AnnealSchedule s(1e-4);
  CHECK(s.observe(1.0).improved);
  for (int i = 0; i < 9; ++i) {
    const auto d = s.observe(1.0);
    CHECK(!d.annealed);
    CHECK(s.lr() == 1e-4);
  }
  const auto d = s.observe(1.0);  // 10th stagnant epoch
  CHECK(d.annealed);
  CHECK(!d.stop);
  CHECK(s.lr() == doctest::Approx(2e-5));
  CHECK(s.anneal_count() == 1);
}

TEST_CASE("anneal schedule: lr sequence 1e-4 -> 2e-5 -> 4e-6, stop at the third event") {
  AnnealSchedule s(1e-4);
  std::vector<double> lrs_seen = {s.lr()};
  int anneals = 0;
  bool stopped = false;
  s.observe(5.0);  // initial best
  for (int epoch = 0; epoch < 100 && !stopped; ++epoch) {
    const auto d = s.observe(5.0);  // flat forever
    if (d.annealed) {
      ++anneals;
      lrs_seen.push_back(s.lr());
      stopped = d.stop;
    }
  }
  CHECK(anneals == 3);
  CHECK(stopped);
  REQUIRE(lrs_seen.size() == 4);
  CHECK(lrs_seen[0] == doctest::Approx(1e-4));
  CHECK(lrs_seen[1] == doctest::Approx(2e-5));
  CHECK(lrs_seen[2] == doctest::Approx(4e-6));
  // invariant: lr always equals initial / 5^anneal_count
  CHECK(s.lr() == doctest::Approx(1e-4 / 125.0));
  CHECK(s.anneal_count() == 3);
}

TEST_CASE("anneal schedule: improvement resets the stagnation counter") {
  AnnealSchedule s(1e-4);
  s.observe(1.0);
  for (int i = 0; i < 9; ++i) s.observe(1.0);
  CHECK(s.observe(0.9).improved);  // reset just before the anneal would fire
  for (int i = 0; i < 9; ++i) CHECK(!s.observe(0.9).annealed);
  CHECK(s.observe(0.9).annealed);
}

TEST_CASE("checkpoint: bit-exact save/load round trip") {
  auto cfg = micro_config();
  FlowModel<float> model(cfg);
  model.randomize(3, 0.1);

  TrainState st;
  st.epoch = 7;
  st.best_val_nll = -1.25;
  st.current_lr = 2e-5;
  st.initial_lr = 1e-4;
  st.anneal_count = 1;
  st.rng_seed = 42;
  st.rng_state = Rng(42).state();

  AdamState<float> adam;
  auto params = model.parameters();
  adam.init(params);
  adam.step_count = 55;
  Rng rng(4);
  for (auto& m : adam.first_moment)
    for (auto& v : m) v = static_cast<float>(rng.normal());

  const auto path = (fs::temp_directory_path() / "voxflow_ckpt_roundtrip.ckpt").string();
  std::vector<std::string> speakers = {"spk_a", "spk_b"};
  save_checkpoint(path, model, speakers, st, &adam);

  auto loaded = load_checkpoint(path);
  CHECK(loaded.model->config() == cfg);
  CHECK(loaded.speaker_names == speakers);
  CHECK(loaded.state.epoch == 7);
  CHECK(loaded.state.best_val_nll == -1.25);
  CHECK(loaded.state.current_lr == 2e-5);
  CHECK(loaded.state.anneal_count == 1);
  CHECK(loaded.state.rng_state == st.rng_state);
  CHECK(loaded.has_optimizer);
  CHECK(loaded.adam.step_count == 55);

  auto lp = loaded.model->parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    REQUIRE(lp[i].size == params[i].size);
    for (int64_t j = 0; j < params[i].size; ++j) CHECK(lp[i].value[j] == params[i].value[j]);
    for (int64_t j = 0; j < params[i].size; ++j)
      CHECK(loaded.adam.first_moment[i][static_cast<size_t>(j)] == adam.first_moment[i][static_cast<size_t>(j)]);
  }

  // saving the loaded model again reproduces the file byte for byte
  const auto path2 = (fs::temp_directory_path() / "voxflow_ckpt_roundtrip2.ckpt").string();
  save_checkpoint(path2, *loaded.model, loaded.speaker_names, loaded.state, &loaded.adam);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint: cross-config load and truncation raise format errors") {
  auto cfg = micro_config();
  FlowModel<float> model(cfg);
  model.randomize(5, 0.1);
  const auto path = (fs::temp_directory_path() / "voxflow_ckpt_mismatch.ckpt").string();
  save_checkpoint(path, model, {"a", "b"}, TrainState{});

  // a model with a different layout cannot absorb these tensors
  auto other = micro_config();
  other.n_flows_per_block = 3;
  {
    const auto blob = read_blob_file(path);
    auto j = nlohmann::json::parse(blob.header_json);
    (void)j;
  }
  auto loaded_blob = read_blob_file(path);
  auto header = nlohmann::json::parse(loaded_blob.header_json);
  header["config"]["n_flows_per_block"] = 3;
  const auto bad_path = (fs::temp_directory_path() / "voxflow_ckpt_badcfg.ckpt").string();
  write_blob_file(bad_path, header.dump(), loaded_blob.tensors);
  CHECK_THROWS_AS(load_checkpoint(bad_path), FormatError);

  // truncated file
  const auto bytes = slurp(path);
  const auto trunc_path = (fs::temp_directory_path() / "voxflow_ckpt_trunc.ckpt").string();
  {
    std::ofstream out(trunc_path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  try {
    load_checkpoint(trunc_path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() >= 0);
  }
}

TEST_CASE("evaluate_nll equals the training loss on the same frames without augmentation") {
  const auto& mc = micro_corpus();
  FlowModel<float> model(micro_config());
  model.init_for_training(11);

  BatchIterator it(mc.corpus, mc.val_idx, 8, AugmentConfig::disabled(), false, 3);
  const auto batch = it.next();
  model.actnorm_init_batch(batch.frames, batch.speakers);

  const double eval = evaluate_nll(model, mc.corpus, mc.val_idx, 64);
  CHECK(std::isfinite(eval));
  const double again = evaluate_nll(model, mc.corpus, mc.val_idx, 64);
  CHECK(eval == again);

  // single-batch split: the training-loss path must agree exactly
  double manual_sum = 0.0;
  int64_t n = 0;
  BatchIterator it2(mc.corpus, mc.val_idx, 16, AugmentConfig::disabled(), false, 9);
  bool done = false;
  while (!done) {
    const auto b = it2.next();
    const auto fr = model.forward(b.frames, b.speakers);
    for (const double v : fr.report.per_sample_per_dim) manual_sum += v;
    n += b.frames.batch();
    done = b.epoch_end;
  }
  CHECK(eval == doctest::Approx(-manual_sum / double(n)).epsilon(1e-12));
}

TEST_CASE("training: two seeded runs produce bit-identical checkpoints, resume continues") {
  const auto& mc = micro_corpus();

  auto run = [&](const std::string& name, int64_t max_epochs) {
    FlowModel<float> model(micro_config());
    model.init_for_training(21);
    TrainOptions opts;
    opts.lr = 1e-3;
    opts.batch_size = 16;
    opts.max_epochs = max_epochs;
    opts.seed = 99;
    opts.run_dir = (fs::temp_directory_path() / name).string();
    fs::remove_all(opts.run_dir);
    return train(model, mc.corpus, mc.train_idx, mc.val_idx, mc.corpus.speaker_names, opts);
  };

  const auto r1 = run("voxflow_run_a", 2);
  const auto r2 = run("voxflow_run_b", 2);
  CHECK(r1.history.size() == 2);
  REQUIRE(fs::exists(r1.last_checkpoint));
  CHECK(slurp(r1.last_checkpoint) == slurp(r2.last_checkpoint));
  CHECK(slurp(r1.best_checkpoint) == slurp(r2.best_checkpoint));

  // a 3-epoch run equals a 2-epoch run resumed for one more epoch
  const auto r3 = run("voxflow_run_c", 3);
  auto resumed = load_checkpoint(r1.last_checkpoint);
  TrainOptions opts;
  opts.lr = 1e-3;
  opts.batch_size = 16;
  opts.max_epochs = 3;
  opts.seed = 99;
  opts.run_dir = (fs::temp_directory_path() / "voxflow_run_a").string();
  const auto r4 = train(*resumed.model, mc.corpus, mc.train_idx, mc.val_idx,
                        resumed.speaker_names, opts, &resumed.state, &resumed.adam);
  CHECK(r4.state.epoch == 3);
  CHECK(r4.history.size() == 3);  // history file keeps earlier epochs
  CHECK(slurp(r3.last_checkpoint) == slurp(r4.last_checkpoint));
}

TEST_CASE("training aborts with a diagnostic checkpoint on non-finite loss") {
  const auto& mc = micro_corpus();
  FlowModel<float> model(micro_config());
  model.init_for_training(31);
  // poison one mixer so the forward pass blows up
  model.steps()[0].mixer.value.fill(std::numeric_limits<float>::quiet_NaN());
  model.bump_version();

  TrainOptions opts;
  opts.max_epochs = 1;
  opts.seed = 1;
  opts.run_dir = (fs::temp_directory_path() / "voxflow_run_nan").string();
  fs::remove_all(opts.run_dir);
  CHECK_THROWS(train(model, mc.corpus, mc.train_idx, mc.val_idx, mc.corpus.speaker_names, opts));
}

TEST_CASE("sentence disjointness is re-asserted at train start") {
  auto corpus = micro_corpus().corpus;
  // corrupt: force one utterance of a shared key into another split
  bool corrupted = false;
  for (size_t i = 0; i < corpus.utterances.size() && !corrupted; ++i)
    for (size_t j = i + 1; j < corpus.utterances.size(); ++j)
      if (corpus.utterances[i].sentence_key == corpus.utterances[j].sentence_key) {
        corpus.utterances[j].split =
            corpus.utterances[i].split == Split::train ? Split::test : Split::train;
        corrupted = true;
        break;
      }
  REQUIRE(corrupted);
  CHECK_THROWS_AS(assert_sentence_disjoint(corpus), StateError);
}
