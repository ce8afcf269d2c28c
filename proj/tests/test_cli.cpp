#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "voxflow/cli.hpp"
#include "voxflow/errors.hpp"

using namespace voxflow;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args) {
  std::vector<char*> argv;
  static char prog[] = "voxflow";
  argv.push_back(prog);
  for (auto& a : args) argv.push_back(a.data());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

fs::path work_dir() {
  const auto d = fs::temp_directory_path() / "voxflow_cli_test";
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config: canonical echo is a fixpoint; unknown keys rejected") {
  const auto dir = work_dir();

  const std::string canonical = render_config("", {});
  const auto cfg_path = dir / "config.json";
  {
    std::ofstream out(cfg_path);
    out << canonical;
  }
  CHECK(render_config(cfg_path.string(), {}) == canonical);

  // non-canonical input (reordered, extra whitespace) still lands on the
  // same canonical form
  {
    std::ofstream out(cfg_path);
    out << "{\"train\": {\"lr\": 1e-4},\n  \"flow\":{\"n_blocks\": 8}}";
  }
  CHECK(render_config(cfg_path.string(), {}) == canonical);

  // overrides change exactly the addressed key
  const std::string with_override = render_config("", {"flow.n_blocks=4"});
  CHECK(with_override != canonical);
  CHECK(with_override.find("\"n_blocks\": 4") != std::string::npos);

  {
    std::ofstream out(cfg_path);
    out << "{\"flow\": {\"blocks\": 4}}";
  }
  CHECK_THROWS_AS(render_config(cfg_path.string(), {}), ConfigError);
  CHECK_THROWS_AS(render_config("", {"flow.blocks=4"}), ConfigError);
}

TEST_CASE("cli pipeline: gen-toy, prepare, train, convert, evaluate") {
  const auto dir = work_dir();
  const auto corpus_dir = dir / "corpus";
  const auto manifest = dir / "manifest.tsv";
  const auto run_dir = dir / "run";
  fs::remove_all(corpus_dir);
  fs::remove_all(run_dir);

  CHECK(run_cli({"gen-toy", "--out", corpus_dir.string(), "--speakers", "2", "--minutes", "0.4",
                 "--utt-seconds", "2", "--seed", "5"}) == 0);
  CHECK(run_cli({"prepare", "--data", corpus_dir.string(), "--out", manifest.string(), "--seed",
                 "3"}) == 0);
  REQUIRE(fs::exists(manifest));

  // identical rerun
  const auto manifest2 = dir / "manifest2.tsv";
  CHECK(run_cli({"prepare", "--data", corpus_dir.string(), "--out", manifest2.string(), "--seed",
                 "3"}) == 0);
  CHECK(slurp(manifest) == slurp(manifest2));

  // missing data directory
  CHECK(run_cli({"prepare", "--data", (dir / "nope").string(), "--out",
                 (dir / "x.tsv").string()}) == 2);

  // micro training run entirely through the CLI
  const int rc = run_cli({"train", "--manifest", manifest.string(), "--outdir", run_dir.string(),
                          "--set", "flow.n_blocks=2", "--set", "flow.n_flows_per_block=2",
                          "--set", "flow.frame_size=256", "--set",
                          "flow.coupling_hidden_channels=12", "--set", "flow.embedding_dim=8",
                          "--set", "train.max_epochs=1", "--set", "train.lr=1e-3"});
  CHECK(rc == 0);
  CHECK(fs::exists(run_dir / "best.ckpt"));
  CHECK(fs::exists(run_dir / "last.ckpt"));
  CHECK(fs::exists(run_dir / "history.csv"));
  CHECK(fs::exists(run_dir / "config.json"));

  // resume for one more epoch
  CHECK(run_cli({"train", "--manifest", manifest.string(), "--outdir", run_dir.string(),
                 "--resume", "--set", "flow.n_blocks=2", "--set", "flow.n_flows_per_block=2",
                 "--set", "flow.frame_size=256", "--set", "flow.coupling_hidden_channels=12",
                 "--set", "flow.embedding_dim=8", "--set", "train.max_epochs=2", "--set",
                 "train.lr=1e-3"}) == 0);
  {
    std::ifstream hist(run_dir / "history.csv");
    std::string line;
    int rows = 0;
    std::getline(hist, line);
    while (std::getline(hist, line))
      if (!line.empty()) ++rows;
    CHECK(rows == 2);
  }

  // invalid config key via --set
  CHECK(run_cli({"train", "--manifest", manifest.string(), "--outdir", run_dir.string(), "--set",
                 "flow.bogus=1"}) == 2);

  // single-file conversion, src = tgt
  const auto in_wav = corpus_dir / "spk_a" / "utt_0000.wav";
  const auto out_wav = dir / "converted.wav";
  CHECK(run_cli({"convert", "--ckpt", (run_dir / "best.ckpt").string(), "--in", in_wav.string(),
                 "--src", "spk_a", "--tgt", "spk_a", "--out", out_wav.string()}) == 0);
  CHECK(fs::exists(out_wav));

  // unknown speaker exits 2 and names the available ones
  CHECK(run_cli({"convert", "--ckpt", (run_dir / "best.ckpt").string(), "--in", in_wav.string(),
                 "--src", "spk_zz", "--tgt", "spk_a", "--out", out_wav.string()}) == 2);

  // batch mode with random targets and a manifest
  const auto jobs = dir / "jobs.csv";
  {
    std::ofstream out(jobs);
    out << "input,src,tgt,output\n";
    out << in_wav.string() << ",spk_a,," << (dir / "conv_out_0.wav").string() << "\n";
    out << (corpus_dir / "spk_b" / "utt_0001.wav").string() << ",spk_b,,"
        << (dir / "conv_out_1.wav").string() << "\n";
  }
  const auto conv_manifest = dir / "conversions.csv";
  CHECK(run_cli({"convert", "--ckpt", (run_dir / "best.ckpt").string(), "--jobs", jobs.string(),
                 "--random-targets", "--seed", "4", "--manifest-out",
                 conv_manifest.string()}) == 0);
  CHECK(fs::exists(conv_manifest));

  // evaluate: L row always present, spoofing when conversions are given
  const auto metrics = dir / "metrics.csv";
  CHECK(run_cli({"evaluate", "--ckpt", (run_dir / "best.ckpt").string(), "--manifest",
                 manifest.string(), "--conversions", conv_manifest.string(), "--out",
                 metrics.string()}) == 0);
  const std::string m = slurp(metrics);
  CHECK(m.rfind("metric,value\nL,", 0) == 0);  // header then the L row
  CHECK(m.find("spoofing_pct,") != std::string::npos);
  CHECK(m.find("classifier_accuracy_pct,") != std::string::npos);

  // deterministic given the same seed, and a warm feature cache agrees
  const auto metrics2 = dir / "metrics2.csv";
  const auto cache = dir / "features.blob";
  CHECK(run_cli({"evaluate", "--ckpt", (run_dir / "best.ckpt").string(), "--manifest",
                 manifest.string(), "--conversions", conv_manifest.string(), "--feature-cache",
                 cache.string(), "--out", metrics2.string()}) == 0);
  REQUIRE(fs::exists(cache));
  const auto metrics3 = dir / "metrics3.csv";
  CHECK(run_cli({"evaluate", "--ckpt", (run_dir / "best.ckpt").string(), "--manifest",
                 manifest.string(), "--conversions", conv_manifest.string(), "--feature-cache",
                 cache.string(), "--out", metrics3.string()}) == 0);
  CHECK(slurp(metrics2) == slurp(metrics3));
}

TEST_CASE("selftest passes, and fails loudly with a zeroed scale epsilon") {
  CHECK(run_cli({"selftest"}) == 0);
  CHECK(run_cli({"selftest", "--float64"}) == 0);
  CHECK(run_cli({"selftest", "--scale-eps", "0"}) != 0);
}
