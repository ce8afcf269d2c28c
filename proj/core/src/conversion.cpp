// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/conversion.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "voxflow/errors.hpp"

namespace voxflow {

Waveform convert_utterance(FlowModel<float>& model, const Waveform& wav, int y_src, int y_tgt,
                           int64_t frames_per_batch) {
  const int64_t F = model.config().frame_size;
  const int64_t hop = F / 2;
  const Waveform norm = normalize_peak(wav);
  const int64_t n = static_cast<int64_t>(norm.samples.size());
  if (n == 0) throw ShapeError("time", "cannot convert an empty utterance");

  // frame starts covering the whole signal; final frame zero-padded
  std::vector<int64_t> starts;
  for (int64_t s = 0;; s += hop) {
    starts.push_back(s);
    if (s + F >= n) break;
  }

  std::vector<std::vector<float>> out_frames(starts.size());
  for (size_t pos = 0; pos < starts.size();) {
    const int64_t b = std::min<int64_t>(frames_per_batch, static_cast<int64_t>(starts.size() - pos));
    Tensor3f x(b, 1, F);
    for (int64_t i = 0; i < b; ++i) {
      const int64_t s = starts[pos + static_cast<size_t>(i)];
      const int64_t avail = std::min(F, n - s);
      float* row = x.row(i, 0);
      for (int64_t t = 0; t < avail; ++t) row[t] = norm.samples[static_cast<size_t>(s + t)];
    }
    std::vector<int> src(static_cast<size_t>(b), y_src), tgt(static_cast<size_t>(b), y_tgt);
    const Tensor3f converted = convert_frames(model, x, src, tgt);
    for (int64_t i = 0; i < b; ++i) {
      const float* row = converted.row(i, 0);
      out_frames[pos + static_cast<size_t>(i)].assign(row, row + F);
    }
    pos += static_cast<size_t>(b);
  }

  Waveform out = overlap_add(out_frames, hop, wav.sample_rate);
  out.samples.resize(static_cast<size_t>(n));  // trim synthesis padding
  out.source_path = wav.source_path;
  for (const float v : out.samples)
    if (!std::isfinite(v))
      throw NonFiniteError("conversion produced non-finite audio for " + wav.source_path);
  return out;
}

void assign_random_targets(std::vector<ConversionJob>& jobs,
                           const std::vector<std::string>& speaker_names, uint64_t seed) {
  Rng rng(seed);
  for (auto& job : jobs) {
    if (!job.target_speaker.empty()) continue;
    std::vector<std::string> pool;
    for (const auto& s : speaker_names)
      if (s != job.source_speaker) pool.push_back(s);
    if (pool.empty()) throw ConfigError("no alternative target speaker available");
    job.target_speaker = pool[rng.uniform_index(pool.size())];
  }
}

BatchConvertReport batch_convert(FlowModel<float>& model,
                                 const std::vector<std::string>& speaker_names,
                                 const std::vector<ConversionJob>& jobs,
                                 const std::string& manifest_path) {
  auto speaker_id = [&](const std::string& name) {
    for (size_t i = 0; i < speaker_names.size(); ++i)
      if (speaker_names[i] == name) return static_cast<int>(i);
    std::string known;
    for (const auto& s : speaker_names) known += (known.empty() ? "" : ", ") + s;
    throw ConfigError("unknown speaker '" + name + "'; available: " + known);
  };

  BatchConvertReport report;
  for (const auto& job : jobs) {
    BatchConvertReport::Row row;
    row.job = job;
    try {
      const int src = speaker_id(job.source_speaker);
      const int tgt = speaker_id(job.target_speaker);
      const Waveform in = read_wav(job.input_path);
      const Waveform out = convert_utterance(model, in, src, tgt);
      write_wav(job.output_path, out);
      row.ok = true;
      report.converted += 1;
    } catch (const Error& e) {
      row.error = e.what();
      report.failed += 1;
      std::error_code ec;
      std::filesystem::remove(job.output_path, ec);  // never leave partial output
    }
    report.rows.push_back(std::move(row));
  }

  if (!manifest_path.empty()) {
    std::ofstream out(manifest_path);
    if (!out) throw IoError("cannot write conversion manifest " + manifest_path);
    out << "input,src,tgt,output\n";
    for (const auto& row : report.rows)
      out << row.job.input_path << ',' << row.job.source_speaker << ',' << row.job.target_speaker
          << ',' << row.job.output_path << '\n';
  }
  return report;
}

}  // namespace voxflow
