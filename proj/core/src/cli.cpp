// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "voxflow/checkpoint.hpp"
#include "voxflow/classifier.hpp"
#include "voxflow/conversion.hpp"
#include "voxflow/corpus.hpp"
#include "voxflow/grad_check.hpp"
#include "voxflow/toygen.hpp"
#include "voxflow/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace voxflow {

namespace {

// ---------------------------------------------------------------------------
// Run configuration: JSON file with a canonical echo. Unknown keys are
// rejected; command-line --set overrides win over file values.
// ---------------------------------------------------------------------------

json default_config() {
  return {
      {"flow",
       {{"n_blocks", 8},
        {"n_flows_per_block", 12},
        {"squeeze_factor", 2},
        {"coupling_hidden_channels", 512},
        {"embedding_dim", 128},
        {"frame_size", 4096},
        {"scale_eps", 1e-6}}},
      {"train",
       {{"lr", 1e-4},
        {"batch_size", 16},
        {"patience", 10},
        {"anneal_factor", 5.0},
        {"max_anneals", 3},
        {"max_epochs", 999},
        {"grad_clip", 0.0},
        {"seed", 1234},
        {"eval_batch_size", 64}}},
      {"augment",
       {{"enabled", true},
        {"jitter", true},
        {"emphasis", true},
        {"scale", true},
        {"flip", true},
        {"emphasis_range", 0.25},
        {"jitter_half_width", -1.0}}},
  };
}

void reject_unknown_keys(const json& value, const json& reference, const std::string& prefix) {
  for (const auto& [key, sub] : value.items()) {
    if (!reference.contains(key))
      throw ConfigError("unknown config key '" + (prefix.empty() ? key : prefix + "." + key) + "'");
    if (sub.is_object()) reject_unknown_keys(sub, reference.at(key), prefix.empty() ? key : prefix + "." + key);
  }
}

json load_config_file(const std::string& path) {
  json cfg = default_config();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json user;
    try {
      in >> user;
    } catch (const json::exception& e) {
      throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    reject_unknown_keys(user, cfg, "");
    cfg.merge_patch(user);
  }
  return cfg;
}

void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
    const std::string dotted = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    const auto dot = dotted.find('.');
    if (dot == std::string::npos) throw ConfigError("--set key must be section.key, got '" + dotted + "'");
    const std::string section = dotted.substr(0, dot), key = dotted.substr(dot + 1);
    if (!cfg.contains(section) || !cfg[section].contains(key))
      throw ConfigError("unknown config key '" + dotted + "'");
    json& slot = cfg[section][key];
    try {
      if (slot.is_boolean())
        slot = (value == "true" || value == "1");
      else if (slot.is_number_integer())
        slot = static_cast<int64_t>(std::stoll(value));
      else if (slot.is_number_float())
        slot = std::stod(value);
      else
        slot = value;
    } catch (const std::exception&) {
      throw ConfigError("cannot parse value '" + value + "' for key '" + dotted + "'");
    }
  }
}

std::string canonical_text(const json& cfg) { return cfg.dump(2) + "\n"; }

FlowConfig flow_config_from(const json& cfg, int64_t n_speakers) {
  const auto& f = cfg.at("flow");
  FlowConfig out;
  out.n_blocks = f.at("n_blocks").get<int64_t>();
  out.n_flows_per_block = f.at("n_flows_per_block").get<int64_t>();
  out.squeeze_factor = f.at("squeeze_factor").get<int64_t>();
  out.coupling_hidden_channels = f.at("coupling_hidden_channels").get<int64_t>();
  out.embedding_dim = f.at("embedding_dim").get<int64_t>();
  out.frame_size = f.at("frame_size").get<int64_t>();
  out.scale_eps = f.at("scale_eps").get<double>();
  out.n_speakers = n_speakers;
  return out;
}

AugmentConfig augment_config_from(const json& cfg) {
  const auto& a = cfg.at("augment");
  AugmentConfig out;
  out.enable_jitter = a.at("jitter").get<bool>();
  out.enable_emphasis = a.at("emphasis").get<bool>();
  out.enable_scale = a.at("scale").get<bool>();
  out.enable_flip = a.at("flip").get<bool>();
  out.emphasis_range = a.at("emphasis_range").get<double>();
  out.jitter_half_width = a.at("jitter_half_width").get<double>();
  return out;
}

TrainOptions train_options_from(const json& cfg) {
  const auto& t = cfg.at("train");
  TrainOptions out;
  out.lr = t.at("lr").get<double>();
  out.batch_size = t.at("batch_size").get<int64_t>();
  out.patience = t.at("patience").get<int64_t>();
  out.anneal_factor = t.at("anneal_factor").get<double>();
  out.max_anneals = t.at("max_anneals").get<int64_t>();
  out.max_epochs = t.at("max_epochs").get<int64_t>();
  out.grad_clip = t.at("grad_clip").get<double>();
  out.seed = t.at("seed").get<uint64_t>();
  out.eval_batch_size = t.at("eval_batch_size").get<int64_t>();
  out.augment = augment_config_from(cfg);
  out.augment_enabled = cfg.at("augment").at("enabled").get<bool>();
  return out;
}

void log_line(const std::string& msg) { std::cout << msg << "\n"; }

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

int cmd_prepare(const std::string& data_dir, const std::string& out_manifest, double val_frac,
                double test_frac, uint64_t seed, const std::string& report_path) {
  Corpus corpus = split_corpus(build_corpus(data_dir), val_frac, test_frac, seed);
  save_manifest(corpus, out_manifest);

  std::ostringstream report;
  report << corpus.report.to_string();
  report << "speakers: " << corpus.speaker_names.size() << "\n";
  for (const auto s : {Split::train, Split::validation, Split::test})
    report << split_name(s) << " utterances: " << corpus.count_of(s) << "\n";
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    out << report.str();
  }
  std::cout << report.str();
  std::cout << "manifest written to " << out_manifest << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              std::string outdir, bool resume, const std::vector<std::string>& sets) {
  json cfg = load_config_file(config_path);
  apply_overrides(cfg, sets);
  if (const char* env = std::getenv("VOXFLOW_RUN_DIR"); env && *env) outdir = env;
  if (outdir.empty()) throw ConfigError("--outdir (or VOXFLOW_RUN_DIR) is required");
  fs::create_directories(outdir);

  Corpus corpus = load_manifest(manifest_path);
  const auto flow_cfg = flow_config_from(cfg, static_cast<int64_t>(corpus.speaker_names.size()));
  flow_cfg.validate();

  {
    std::ofstream echo(outdir + "/config.json");
    echo << canonical_text(cfg);
  }

  TrainOptions opts = train_options_from(cfg);
  opts.run_dir = outdir;
  opts.log = log_line;

  log_line("indexing frames...");
  const FrameIndex train_idx = index_frames(corpus, Split::train, flow_cfg.frame_size);
  const FrameIndex val_idx = index_frames(corpus, Split::validation, flow_cfg.frame_size);
  log_line("train frames: " + std::to_string(train_idx.entries.size()) +
           ", validation frames: " + std::to_string(val_idx.entries.size()));

  if (resume) {
    auto loaded = load_checkpoint(outdir + "/last.ckpt");
    if (!(loaded.model->config() == flow_cfg))
      throw ConfigError("checkpoint config does not match the requested configuration");
    if (loaded.speaker_names != corpus.speaker_names)
      throw ConfigError("checkpoint speakers do not match the manifest");
    const auto result = train(*loaded.model, corpus, train_idx, val_idx, corpus.speaker_names, opts,
                              &loaded.state, loaded.has_optimizer ? &loaded.adam : nullptr);
    log_line("resumed training done at epoch " + std::to_string(result.state.epoch));
    return 0;
  }

  FlowModel<float> model(flow_cfg);
  model.init_for_training(opts.seed);
  const auto result = train(model, corpus, train_idx, val_idx, corpus.speaker_names, opts);
  log_line("training done at epoch " + std::to_string(result.state.epoch) + ", best val nll " +
           std::to_string(result.best_val_nll));
  return 0;
}

int cmd_convert(const std::string& ckpt_path, const std::string& in_wav, const std::string& src,
                const std::string& tgt, const std::string& out_wav, const std::string& jobs_csv,
                const std::string& outdir, const std::string& manifest_out, bool random_targets,
                uint64_t seed) {
  auto loaded = load_checkpoint(ckpt_path);
  FlowModel<float>& model = *loaded.model;

  if (!in_wav.empty()) {
    const int src_id = loaded.speaker_id(src);
    const int tgt_id = loaded.speaker_id(tgt);
    if (src_id < 0 || tgt_id < 0) {
      std::string known;
      for (const auto& s : loaded.speaker_names) known += (known.empty() ? "" : ", ") + s;
      throw ConfigError("unknown speaker '" + (src_id < 0 ? src : tgt) + "'; available: " + known);
    }
    const Waveform in = read_wav(in_wav);
    const Waveform out = convert_utterance(model, in, src_id, tgt_id);
    write_wav(out_wav, out);
    std::cout << "wrote " << out_wav << "\n";
    return 0;
  }

  // batch mode: jobs CSV of input,src,tgt,output (tgt may be empty)
  std::ifstream jobs_in(jobs_csv);
  if (!jobs_in) throw ConfigError("cannot open jobs file " + jobs_csv);
  std::vector<ConversionJob> jobs;
  std::string line;
  bool header = true;
  while (std::getline(jobs_in, line)) {
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
    if (cols.size() != 4) throw FormatError("jobs row needs input,src,tgt,output: " + line);
    ConversionJob job{cols[0], cols[1], cols[2], cols[3]};
    if (!outdir.empty() && job.output_path.find('/') == std::string::npos)
      job.output_path = outdir + "/" + job.output_path;
    jobs.push_back(std::move(job));
  }
  if (random_targets) {
    for (auto& j : jobs) j.target_speaker.clear();
    assign_random_targets(jobs, loaded.speaker_names, seed);
  }
  if (!outdir.empty()) fs::create_directories(outdir);

  const auto report = batch_convert(model, loaded.speaker_names, jobs, manifest_out);
  std::cout << "converted " << report.converted << ", failed " << report.failed << "\n";
  for (const auto& row : report.rows)
    if (!row.ok) std::cout << "  error: " << row.job.input_path << ": " << row.error << "\n";
  return report.converted > 0 || jobs.empty() ? 0 : 1;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& manifest_path,
                 const std::string& conversions_csv, bool probe, const std::string& metrics_out,
                 const std::string& feature_cache, uint64_t seed) {
  auto loaded = load_checkpoint(ckpt_path);
  Corpus corpus = load_manifest(manifest_path);
  if (corpus.speaker_names != loaded.speaker_names)
    throw ConfigError("manifest speakers do not match the checkpoint");

  const int64_t frame_size = loaded.model->config().frame_size;
  const FrameIndex test_idx = index_frames(corpus, Split::test, frame_size);

  std::vector<std::pair<std::string, double>> metrics;
  const double nll = evaluate_nll(*loaded.model, corpus, test_idx);
  metrics.emplace_back("L", -nll);  // higher is better

  SpoofClassifier clf;
  if (!conversions_csv.empty() || probe) {
    log_line("training the spoofing classifier...");
    ClassifierOptions copts;
    copts.seed = seed;
    clf = train_spoof_classifier(corpus, copts, feature_cache);
    const auto test_set = corpus_features(corpus, Split::test, feature_cache);
    metrics.emplace_back("classifier_accuracy_pct", classifier_accuracy(clf, test_set.x, test_set.y));
  }

  if (!conversions_csv.empty()) {
    const auto res = spoofing_rate(clf, conversions_csv, corpus.speaker_names);
    metrics.emplace_back("spoofing_pct", res.rate_pct);
    for (const auto& m : res.missing) std::cout << "missing conversion output: " << m << "\n";
  }

  if (probe) {
    log_line("running the latent identity probe...");
    const FrameIndex train_idx = index_frames(corpus, Split::train, frame_size);
    const FrameIndex val_idx = index_frames(corpus, Split::validation, frame_size);
    ClassifierOptions popts;
    popts.seed = seed + 1;
    const auto res = latent_probe(*loaded.model, corpus, train_idx, val_idx, test_idx, popts);
    metrics.emplace_back("probe_accuracy_pct", res.accuracy_pct);
    metrics.emplace_back("probe_chance_pct", res.chance_pct);
  }

  std::ostringstream csv;
  csv << "metric,value\n";
  char buf[64];
  for (const auto& [name, value] : metrics) {
    std::snprintf(buf, sizeof(buf), "%.6g", value);
    csv << name << ',' << buf << "\n";
  }
  if (!metrics_out.empty()) {
    std::ofstream out(metrics_out);
    out << csv.str();
  }
  std::cout << csv.str();
  return 0;
}

int cmd_selftest(bool use_float64, double scale_eps) {
  int failures = 0;
  auto check = [&](bool ok, const std::string& name, const std::string& detail = "") {
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << name;
    if (!detail.empty()) std::cout << " (" << detail << ")";
    std::cout << "\n";
    if (!ok) ++failures;
  };

  // invertibility
  {
    FlowConfig cfg;
    cfg.n_blocks = use_float64 ? 2 : 3;
    cfg.n_flows_per_block = 2;
    cfg.frame_size = use_float64 ? 64 : 256;
    cfg.coupling_hidden_channels = 16;
    cfg.embedding_dim = 16;
    cfg.n_speakers = 2;
    Rng rng(1);
    std::vector<int> spk = {0, 1, 0, 1};
    if (use_float64) {
      FlowModel<double> model(cfg);
      model.randomize(2, 0.1);
      Tensor3d x(4, 1, cfg.frame_size);
      for (int64_t i = 0; i < x.size(); ++i) x[i] = 0.5 * rng.normal();
      const auto back = model.inverse(model.forward(x, spk).z, spk);
      double worst = 0;
      for (int64_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(back[i] - x[i]));
      check(worst < 1e-8, "invertibility (float64)", "max err " + std::to_string(worst));
    } else {
      FlowModel<float> model(cfg);
      model.randomize(2, 0.1);
      Tensor3f x(4, 1, cfg.frame_size);
      for (int64_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(0.5 * rng.normal());
      const auto back = model.inverse(model.forward(x, spk).z, spk);
      float worst = 0;
      for (int64_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(back[i] - x[i]));
      check(worst < 1e-4f, "invertibility (float32)", "max err " + std::to_string(worst));
    }
  }

  // log-det against a finite-difference Jacobian
  {
    FlowConfig cfg;
    cfg.n_blocks = 1;
    cfg.n_flows_per_block = 2;
    cfg.frame_size = 8;
    cfg.coupling_hidden_channels = 6;
    cfg.embedding_dim = 8;
    cfg.n_speakers = 2;
    FlowModel<double> model(cfg);
    model.randomize(3, 0.2);
    Rng rng(4);
    Tensor3d x(1, 1, 8);
    for (int64_t i = 0; i < 8; ++i) x[i] = 0.5 * rng.normal();
    std::vector<int> spk = {0};
    const auto fr = model.forward(x, spk);
    Tensor3d jac = Tensor3d::matrix(8, 8);
    const double h = 1e-6;
    for (int64_t j = 0; j < 8; ++j) {
      Tensor3d xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      const auto zp = model.forward(xp, spk).z;
      const auto zm = model.forward(xm, spk).z;
      for (int64_t i = 0; i < 8; ++i) jac.at(i, j) = (zp[i] - zm[i]) / (2 * h);
    }
    const double oracle = lu_det_inverse(jac).log_abs_det;
    const double rel = std::abs(fr.report.logdet_total - oracle) / std::max(1.0, std::abs(oracle));
    check(rel < 1e-5, "log-det Jacobian oracle", "rel err " + std::to_string(rel));
  }

  // gradient check
  {
    FlowConfig cfg;
    cfg.n_blocks = 1;
    cfg.n_flows_per_block = 2;
    cfg.frame_size = 8;
    cfg.coupling_hidden_channels = 6;
    cfg.embedding_dim = 8;
    cfg.n_speakers = 2;
    FlowModel<double> model(cfg);
    model.randomize(5, 0.2);
    Rng rng(6);
    Tensor3d x(2, 1, 8);
    for (int64_t i = 0; i < x.size(); ++i) x[i] = 0.5 * rng.normal();
    std::vector<int> spk = {0, 1};
    auto with_grad = [&]() {
      model.bump_version();
      model.zero_grad();
      return model.nll_backward(x, spk);
    };
    auto only = [&]() {
      model.bump_version();
      return -model.forward(x, spk).report.per_dim;
    };
    GradCheckOptions gopts;
    gopts.max_coords = 64;
    const auto rep = grad_check(with_grad, only, model.parameters(), 1e-4, gopts);
    check(rep.passed(1e-4), "gradient check",
          "max rel err " + std::to_string(rep.max_rel_err) + " at " + rep.worst_param);
  }

  // COLA of the synthesis window
  {
    std::vector<std::vector<float>> ones(8, std::vector<float>(256, 1.0f));
    const auto raw = overlap_add_raw(ones, 128);
    float worst = 0;
    for (int64_t t = 128; t < 8 * 128; ++t) worst = std::max(worst, std::abs(raw[size_t(t)] - 1.0f));
    check(worst < 1e-6f, "overlap-add COLA", "interior err " + std::to_string(worst));
  }

  // annealing schedule
  {
    AnnealSchedule s(1e-4);
    s.observe(1.0);
    bool ok = true;
    int anneals = 0;
    for (int i = 0; i < 50 && anneals < 3; ++i) {
      const auto d = s.observe(1.0);
      if (d.annealed) {
        ++anneals;
        if (anneals == 1) ok = ok && std::abs(s.lr() - 2e-5) < 1e-12 && i == 9;
        if (anneals == 2) ok = ok && std::abs(s.lr() - 4e-6) < 1e-12;
        if (anneals == 3) ok = ok && d.stop;
      }
    }
    check(ok && anneals == 3, "anneal schedule");
  }

  // coupling log-det floor: with the configured eps the scale cannot reach
  // zero even for saturated inputs
  {
    FlowStep<float> step;
    step.channels = 2;
    step.scale_eps = scale_eps;
    step.mixer = Param<float>("w", Tensor3f::matrix(2, 2));
    step.actnorm_scale = Param<float>("s", Tensor3f::vector(2));
    step.actnorm_bias = Param<float>("b", Tensor3f::vector(2));
    step.adapter_weight = Param<float>("aw", Tensor3f::matrix(4, 4));
    step.adapter_bias = Param<float>("ab", Tensor3f::vector(4));
    step.conv1_weight = Param<float>("c1w", Tensor3f(4, 1, 1));
    step.conv1_bias = Param<float>("c1b", Tensor3f::vector(4));
    step.conv2_weight = Param<float>("c2w", Tensor3f(2, 4, 3));
    step.conv2_bias = Param<float>("c2b", Tensor3f::vector(2));
    step.conv2_bias.value[0] = -106.0f;  // saturate the sigmoid to zero
    step.actnorm_initialized = true;

    Rng rng(7);
    Tensor3f h(1, 2, 16);
    for (int64_t i = 0; i < h.size(); ++i) h[i] = static_cast<float>(rng.normal());
    Tensor3f emb = Tensor3f::matrix(4, 1);
    std::vector<double> logdet(1, 0.0);
    step.coupling_forward(h, emb, &logdet, nullptr);
    const double bound = 1.0 * 16.0 * std::log(scale_eps);
    const bool ok = std::isfinite(logdet[0]) && logdet[0] >= bound - 1e-6;
    check(ok, "coupling log-det floor", "logdet " + std::to_string(logdet[0]));
  }

  std::cout << (failures == 0 ? "selftest passed" : "selftest FAILED") << "\n";
  return failures == 0 ? 0 : 1;
}

int cmd_gen_toy(const std::string& out_dir, int speakers, double minutes, double utt_seconds,
                uint64_t seed) {
  ToyCorpusConfig cfg;
  cfg.n_speakers = speakers;
  cfg.minutes_per_speaker = minutes;
  cfg.utterance_seconds = utt_seconds;
  cfg.seed = seed;
  const int64_t written = generate_toy_corpus(out_dir, cfg);
  std::cout << "wrote " << written << " utterances under " << out_dir << "\n";
  return 0;
}

}  // namespace

std::string render_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  json cfg = load_config_file(config_path);
  apply_overrides(cfg, overrides);
  return canonical_text(cfg);
}

int cli_main(int argc, char** argv) {
  CLI::App app{"voxflow: single-scale normalizing flow for frame-by-frame voice conversion"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "scan a corpus tree and write a split manifest");
  std::string data_dir, out_manifest, report_path;
  double val_frac = 0.1, test_frac = 0.1;
  uint64_t prep_seed = 1234;
  prepare->add_option("--data", data_dir, "corpus root: <root>/<speaker>/<utterance>.wav")->required();
  prepare->add_option("--out", out_manifest, "manifest output path")->required();
  prepare->add_option("--val-frac", val_frac, "validation sentence fraction");
  prepare->add_option("--test-frac", test_frac, "test sentence fraction");
  prepare->add_option("--seed", prep_seed, "split shuffle seed");
  prepare->add_option("--report", report_path, "write the build report here");

  // train
  auto* tr = app.add_subcommand("train", "train a model from a split manifest");
  std::string config_path, manifest_path, outdir;
  bool resume = false;
  std::vector<std::string> sets;
  tr->add_option("--config", config_path, "JSON config file (defaults used when omitted)");
  tr->add_option("--manifest", manifest_path, "split manifest from 'prepare'")->required();
  tr->add_option("--outdir", outdir, "run directory for checkpoints and history");
  tr->add_flag("--resume", resume, "continue from <outdir>/last.ckpt");
  tr->add_option("--set", sets, "override config values, e.g. --set flow.n_blocks=4");

  // convert
  auto* cv = app.add_subcommand("convert", "convert utterances between speakers");
  std::string ckpt, in_wav, src, tgt, out_wav, jobs_csv, conv_outdir, manifest_out;
  bool random_targets = false;
  uint64_t conv_seed = 1234;
  cv->add_option("--ckpt", ckpt, "model checkpoint")->required();
  cv->add_option("--in", in_wav, "input WAV (single-file mode)");
  cv->add_option("--src", src, "source speaker name");
  cv->add_option("--tgt", tgt, "target speaker name");
  cv->add_option("--out", out_wav, "output WAV (single-file mode)");
  cv->add_option("--jobs", jobs_csv, "batch mode: CSV of input,src,tgt,output");
  cv->add_option("--outdir", conv_outdir, "directory for relative batch outputs");
  cv->add_option("--manifest-out", manifest_out, "write the conversion manifest CSV here");
  cv->add_flag("--random-targets", random_targets, "draw targets uniformly over the other speakers");
  cv->add_option("--seed", conv_seed, "random-target seed");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "objective metrics: L, spoofing, latent probe");
  std::string ev_ckpt, ev_manifest, conversions_csv, metrics_out, feature_cache;
  bool probe = false;
  uint64_t ev_seed = 7;
  ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--manifest", ev_manifest, "split manifest")->required();
  ev->add_option("--conversions", conversions_csv, "conversion manifest to score for spoofing");
  ev->add_flag("--probe", probe, "also run the latent identity probe");
  ev->add_option("--out", metrics_out, "metrics CSV output path");
  ev->add_option("--feature-cache", feature_cache, "memoize MFCC features in this blob file");
  ev->add_option("--seed", ev_seed, "classifier seed");

  // selftest
  auto* st = app.add_subcommand("selftest", "run the built-in verification suite");
  bool use_float64 = false;
  double st_eps = 1e-6;
  st->add_flag("--float64", use_float64, "run the tighter double-precision variant");
  st->add_option("--scale-eps", st_eps, "coupling scale epsilon under test");

  // gen-toy
  auto* gt = app.add_subcommand("gen-toy", "generate a synthetic desk-scale corpus");
  std::string toy_out;
  int toy_speakers = 2;
  double toy_minutes = 10.0, toy_utt_seconds = 4.0;
  uint64_t toy_seed = 1234;
  gt->add_option("--out", toy_out, "output directory")->required();
  gt->add_option("--speakers", toy_speakers, "number of synthetic speakers");
  gt->add_option("--minutes", toy_minutes, "minutes of audio per speaker");
  gt->add_option("--utt-seconds", toy_utt_seconds, "nominal utterance length");
  gt->add_option("--seed", toy_seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (prepare->parsed())
      return cmd_prepare(data_dir, out_manifest, val_frac, test_frac, prep_seed, report_path);
    if (tr->parsed()) return cmd_train(config_path, manifest_path, outdir, resume, sets);
    if (cv->parsed()) {
      if (in_wav.empty() == jobs_csv.empty())
        throw ConfigError("convert needs exactly one of --in or --jobs");
      if (!in_wav.empty() && (src.empty() || tgt.empty() || out_wav.empty()))
        throw ConfigError("single-file convert needs --src, --tgt and --out");
      return cmd_convert(ckpt, in_wav, src, tgt, out_wav, jobs_csv, conv_outdir, manifest_out,
                         random_targets, conv_seed);
    }
    if (ev->parsed())
      return cmd_evaluate(ev_ckpt, ev_manifest, conversions_csv, probe, metrics_out, feature_cache,
                          ev_seed);
    if (st->parsed()) return cmd_selftest(use_float64, st_eps);
    if (gt->parsed()) return cmd_gen_toy(toy_out, toy_speakers, toy_minutes, toy_utt_seconds, toy_seed);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace voxflow
