// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <complex>
#include <vector>

#include "voxflow/audio.hpp"

namespace voxflow {

struct MfccConfig {
  int64_t window = 256;
  int64_t hop = 128;
  int64_t n_fft = 2048;
  int64_t n_mels = 200;
  int64_t n_mfcc = 40;
  double log_floor = 1e-10;
  double sample_rate = 16000.0;
};

// In-place iterative radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& a);

// Slaney-style mel filterbank (triangles, area-normalized), rows n_mels,
// cols n_fft/2 + 1.
std::vector<std::vector<double>> mel_filterbank(const MfccConfig& cfg);

// Power spectrogram: Hann-windowed frames zero-padded to n_fft, one row per
// frame, n_fft/2 + 1 bins. Throws when the signal is shorter than one window.
std::vector<std::vector<double>> stft_power(std::span<const float> samples, const MfccConfig& cfg);

// Per-frame feature rows: [n_mfcc MFCC, n_mfcc deltas, n_mfcc delta-deltas,
// RMS energy]. Deltas use +/-2-frame regression with replicated edges.
std::vector<std::vector<double>> mfcc_frames(std::span<const float> samples, const MfccConfig& cfg);

// File-level summary: mean of every per-frame feature followed by the
// population standard deviation. 2 * (3 * n_mfcc + 1) = 242 values.
std::vector<double> mfcc_features(const Waveform& w, const MfccConfig& cfg = {});

inline constexpr int64_t kFeatureDim = 242;

}  // namespace voxflow
