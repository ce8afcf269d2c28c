// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "voxflow/errors.hpp"

namespace voxflow {

namespace {

constexpr double kPi = 3.14159265358979323846;

uint32_t read_u32(std::istream& in, int64_t& offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw FormatError("unexpected end of file", offset);
  offset += 4;
  return b[0] | (b[1] << 8) | (b[2] << 16) | (uint32_t(b[3]) << 24);
}

uint16_t read_u16(std::istream& in, int64_t& offset) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  if (!in) throw FormatError("unexpected end of file", offset);
  offset += 2;
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, uint32_t v) {
  const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
  out.write(b, 4);
}

void write_u16(std::ostream& out, uint16_t v) {
  const char b[2] = {char(v & 0xff), char((v >> 8) & 0xff)};
  out.write(b, 2);
}

}  // namespace

Waveform read_wav(const std::string& path, const WavReadOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  int64_t offset = 0;

  char tag[5] = {0};
  in.read(tag, 4);
  if (!in || std::strncmp(tag, "RIFF", 4) != 0) throw FormatError("missing RIFF tag in " + path, 0);
  offset += 4;
  read_u32(in, offset);  // riff size, unused
  in.read(tag, 4);
  if (!in || std::strncmp(tag, "WAVE", 4) != 0) throw FormatError("missing WAVE tag in " + path, offset);
  offset += 4;

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  Waveform w;
  w.source_path = path;

  while (in.read(tag, 4)) {
    offset += 4;
    const uint32_t chunk_size = read_u32(in, offset);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      format = read_u16(in, offset);
      channels = read_u16(in, offset);
      rate = read_u32(in, offset);
      read_u32(in, offset);  // byte rate
      read_u16(in, offset);  // block align
      bits = read_u16(in, offset);
      if (chunk_size > 16) {
        in.seekg(chunk_size - 16, std::ios::cur);
        offset += chunk_size - 16;
      }
      have_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk in " + path, offset);
      if (channels != 1)
        throw FormatError("channels: expected mono, got " + std::to_string(channels) + " in " + path);
      if (opts.strict_rate && static_cast<int>(rate) != opts.expected_rate)
        throw FormatError("sample_rate: expected " + std::to_string(opts.expected_rate) + ", got " +
                          std::to_string(rate) + " in " + path);
      w.sample_rate = static_cast<int>(rate);

      if (format == 1 && bits == 16) {
        const size_t n = chunk_size / 2;
        std::vector<char> raw(chunk_size);
        in.read(raw.data(), chunk_size);
        if (!in) throw FormatError("truncated data chunk in " + path, offset);
        w.samples.resize(n);
        for (size_t i = 0; i < n; ++i) {
          const int16_t s = static_cast<int16_t>(static_cast<unsigned char>(raw[2 * i]) |
                                                 (static_cast<unsigned char>(raw[2 * i + 1]) << 8));
          w.samples[i] = static_cast<float>(s) / 32768.0f;
        }
      } else if (format == 3 && bits == 32) {
        const size_t n = chunk_size / 4;
        w.samples.resize(n);
        in.read(reinterpret_cast<char*>(w.samples.data()), static_cast<std::streamsize>(n) * 4);
        if (!in) throw FormatError("truncated data chunk in " + path, offset);
      } else {
        throw FormatError("codec: unsupported format " + std::to_string(format) + "/" +
                          std::to_string(bits) + " bits in " + path);
      }
      return w;
    } else {
      // Skip LIST, fact, and friends. Chunks are word-aligned.
      in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
      offset += chunk_size + (chunk_size & 1);
    }
  }
  throw FormatError("no data chunk found in " + path, offset);
}

WavWriteStats write_wav(const std::string& path, const Waveform& w) {
  // quantize fully before opening the file: a failed conversion must not
  // leave a truncated WAV behind
  WavWriteStats stats;
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  const uint32_t data_bytes = n * 2;
  const float hi = 1.0f - 1.0f / 32768.0f;
  std::vector<char> raw(data_bytes);
  for (uint32_t i = 0; i < n; ++i) {
    float v = w.samples[i];
    if (!std::isfinite(v)) throw Error("non-finite sample at index " + std::to_string(i));
    if (v > hi || v < -1.0f) {
      v = std::clamp(v, -1.0f, hi);
      stats.clipped += 1;
    }
    const int16_t q = static_cast<int16_t>(std::lrintf(v * 32768.0f));
    raw[2 * i] = static_cast<char>(q & 0xff);
    raw[2 * i + 1] = static_cast<char>((q >> 8) & 0xff);
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, static_cast<uint32_t>(w.sample_rate));
  write_u32(out, static_cast<uint32_t>(w.sample_rate) * 2);
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  out.write(raw.data(), data_bytes);
  if (!out) throw IoError("write failed for " + path);
  return stats;
}

Waveform normalize_peak(const Waveform& w, bool* was_silent) {
  float peak = 0.0f;
  for (const float v : w.samples) peak = std::max(peak, std::abs(v));
  if (peak == 0.0f) {
    if (was_silent) *was_silent = true;
    return w;
  }
  if (was_silent) *was_silent = false;
  Waveform out = w;
  for (float& v : out.samples) v /= peak;
  return out;
}

std::vector<int64_t> frame_starts(int64_t n, int64_t frame_size, int64_t hop) {
  if (frame_size <= 0) throw ShapeError("time", "frame_size must be > 0");
  if (hop <= 0 || hop > frame_size) throw ShapeError("time", "hop must be in (0, frame_size]");
  std::vector<int64_t> starts;
  for (int64_t s = 0; s + frame_size <= n; s += hop) starts.push_back(s);
  return starts;
}

std::vector<std::vector<float>> frame_signal(const Waveform& w, int64_t frame_size, int64_t hop) {
  std::vector<std::vector<float>> frames;
  for (const int64_t s : frame_starts(static_cast<int64_t>(w.samples.size()), frame_size, hop))
    frames.emplace_back(w.samples.begin() + s, w.samples.begin() + s + frame_size);
  return frames;
}

bool is_silent(std::span<const float> frame) {
  if (frame.empty()) throw ShapeError("time", "is_silent on empty frame");
  double mean = 0.0;
  for (const float v : frame) mean += v;
  mean /= static_cast<double>(frame.size());
  double var = 0.0;
  for (const float v : frame) {
    const double d = v - mean;
    var += d * d;
  }
  var /= static_cast<double>(frame.size());
  return std::sqrt(var) < kSilenceStd;
}

std::vector<float> emphasis_filter(std::span<const float> x, float alpha) {
  std::vector<float> y(x.size());
  float prev = 0.0f;
  for (size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] - alpha * prev;
    prev = x[i];
  }
  return y;
}

std::vector<float> augment(const Waveform& source, int64_t start, int64_t frame_size,
                           const AugmentConfig& cfg, Rng& rng) {
  const int64_t n = static_cast<int64_t>(source.samples.size());

  // 1. temporal jitter; the shifted start is clamped so the frame stays
  // inside the file.
  int64_t s = start;
  if (cfg.enable_jitter) {
    const double xi = cfg.jitter_half_width < 0 ? static_cast<double>(frame_size) / 2.0
                                                : cfg.jitter_half_width;
    s += std::llround(rng.uniform(-xi, xi));
  }
  s = std::clamp<int64_t>(s, 0, std::max<int64_t>(0, n - frame_size));

  std::vector<float> frame(static_cast<size_t>(frame_size), 0.0f);
  const int64_t avail = std::min(frame_size, n - s);
  for (int64_t i = 0; i < avail; ++i) frame[static_cast<size_t>(i)] = source.samples[s + i];

  // 2. random pre-/de-emphasis
  if (cfg.enable_emphasis) {
    const float alpha = static_cast<float>(rng.uniform(-cfg.emphasis_range, cfg.emphasis_range));
    frame = emphasis_filter(frame, alpha);
  }

  // 3. random amplitude scaling against the current peak
  if (cfg.enable_scale) {
    const float target = static_cast<float>(rng.uniform());
    float peak = 0.0f;
    for (const float v : frame) peak = std::max(peak, std::abs(v));
    if (peak > 0.0f) {
      const float gain = target / peak;
      for (float& v : frame) v *= gain;
    }
  }

  // 4. random sign flip
  if (cfg.enable_flip) {
    if (rng.uniform(-1.0, 1.0) < 0.0)
      for (float& v : frame) v = -v;
  }
  return frame;
}

std::vector<float> periodic_hann(int64_t n) {
  std::vector<float> w(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] =
        static_cast<float>(0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n))));
  return w;
}

std::vector<float> overlap_add_raw(const std::vector<std::vector<float>>& frames, int64_t hop) {
  if (frames.empty()) return {};
  const int64_t fs = static_cast<int64_t>(frames.front().size());
  if (hop != fs / 2) throw ShapeError("time", "overlap_add requires hop = frame_size / 2");
  for (const auto& f : frames)
    if (static_cast<int64_t>(f.size()) != fs)
      throw ShapeError("time", "overlap_add frames must share one length");

  const auto window = periodic_hann(fs);
  std::vector<float> out(static_cast<size_t>((static_cast<int64_t>(frames.size()) - 1) * hop + fs), 0.0f);
  for (size_t fi = 0; fi < frames.size(); ++fi) {
    const int64_t off = static_cast<int64_t>(fi) * hop;
    const auto& f = frames[fi];
    for (int64_t i = 0; i < fs; ++i)
      out[static_cast<size_t>(off + i)] += window[static_cast<size_t>(i)] * f[static_cast<size_t>(i)];
  }
  return out;
}

Waveform overlap_add(const std::vector<std::vector<float>>& frames, int64_t hop, int sample_rate) {
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples = overlap_add_raw(frames, hop);
  return normalize_peak(w);
}

}  // namespace voxflow
