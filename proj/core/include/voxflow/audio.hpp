// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxflow/rng.hpp"

namespace voxflow {

struct Waveform {
  std::vector<float> samples;  // in [-1, 1] once normalized
  int sample_rate = 16000;
  std::string source_path;
};

struct WavReadOptions {
  bool strict_rate = true;  // reject files whose rate differs from expected_rate
  int expected_rate = 16000;
};

// RIFF/WAVE reader: mono, 16-bit PCM or 32-bit IEEE float. int16 samples are
// scaled by 1/32768.
Waveform read_wav(const std::string& path, const WavReadOptions& opts = {});

struct WavWriteStats {
  int64_t clipped = 0;  // samples outside [-1, 1 - 1/32768] before quantization
};

// 16-bit PCM mono writer. Out-of-range samples are clipped and counted.
WavWriteStats write_wav(const std::string& path, const Waveform& w);

// Scale so the peak is exactly 1. All-zero input is returned unchanged and
// flagged via *was_silent.
Waveform normalize_peak(const Waveform& w, bool* was_silent = nullptr);

// Frame start offsets 0, hop, 2*hop, ... with the trailing partial frame
// dropped. Empty when n < frame_size.
std::vector<int64_t> frame_starts(int64_t n, int64_t frame_size, int64_t hop);

std::vector<std::vector<float>> frame_signal(const Waveform& w, int64_t frame_size, int64_t hop);

// Population standard deviation strictly below 0.025.
bool is_silent(std::span<const float> frame);
inline constexpr double kSilenceStd = 0.025;

struct AugmentConfig {
  double jitter_half_width = -1;  // samples; < 0 means frame_size / 2
  double emphasis_range = 0.25;   // alpha drawn uniformly on (-range, range)
  bool enable_jitter = true;
  bool enable_emphasis = true;
  bool enable_scale = true;
  bool enable_flip = true;
  uint64_t rng_seed = 0;

  static AugmentConfig disabled() {
    AugmentConfig c;
    c.enable_jitter = c.enable_emphasis = c.enable_scale = c.enable_flip = false;
    return c;
  }
};

// First-order emphasis y[n] = x[n] - alpha * x[n-1], x[-1] = 0.
std::vector<float> emphasis_filter(std::span<const float> x, float alpha);

// Cut one augmented frame from `source` starting near `start`. Stages in
// order: temporal jitter of the start offset, random emphasis filter, random
// peak rescale, random sign flip. Disabled stages draw nothing from the rng.
std::vector<float> augment(const Waveform& source, int64_t start, int64_t frame_size,
                           const AugmentConfig& cfg, Rng& rng);

// Periodic (DFT-even) Hann window; sums to a constant at 50% overlap.
std::vector<float> periodic_hann(int64_t n);

// Windowed overlap-add without the final peak normalization.
std::vector<float> overlap_add_raw(const std::vector<std::vector<float>>& frames, int64_t hop);

// Hann-windowed 50%-overlap synthesis, peak-normalized to [-1, 1].
Waveform overlap_add(const std::vector<std::vector<float>>& frames, int64_t hop,
                     int sample_rate = 16000);

}  // namespace voxflow
