// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/mfcc.hpp"

#include <algorithm>
#include <cmath>

#include "voxflow/errors.hpp"

namespace voxflow {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Slaney mel scale: linear below 1 kHz, logarithmic above.
double hz_to_mel(double hz) {
  if (hz < 1000.0) return hz * 3.0 / 200.0;
  return 15.0 + 27.0 * std::log(hz / 1000.0) / std::log(6.4);
}

double mel_to_hz(double mel) {
  if (mel < 15.0) return mel * 200.0 / 3.0;
  return 1000.0 * std::exp(std::log(6.4) * (mel - 15.0) / 27.0);
}

}  // namespace

void fft_radix2(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ShapeError("time", "fft size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

std::vector<std::vector<double>> mel_filterbank(const MfccConfig& cfg) {
  const int64_t bins = cfg.n_fft / 2 + 1;
  const double fmax = cfg.sample_rate / 2.0;
  const double mel_max = hz_to_mel(fmax);

  std::vector<double> hz(static_cast<size_t>(cfg.n_mels) + 2);
  for (size_t i = 0; i < hz.size(); ++i)
    hz[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));

  std::vector<std::vector<double>> fb(static_cast<size_t>(cfg.n_mels),
                                      std::vector<double>(static_cast<size_t>(bins), 0.0));
  for (int64_t m = 0; m < cfg.n_mels; ++m) {
    const double lo = hz[static_cast<size_t>(m)];
    const double mid = hz[static_cast<size_t>(m) + 1];
    const double hi = hz[static_cast<size_t>(m) + 2];
    const double norm = 2.0 / (hi - lo);  // Slaney area normalization
    for (int64_t k = 0; k < bins; ++k) {
      const double f = cfg.sample_rate * static_cast<double>(k) / static_cast<double>(cfg.n_fft);
      double w = 0.0;
      if (f > lo && f < mid)
        w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        w = (hi - f) / (hi - mid);
      fb[static_cast<size_t>(m)][static_cast<size_t>(k)] = w * norm;
    }
  }
  return fb;
}

std::vector<std::vector<double>> stft_power(std::span<const float> samples, const MfccConfig& cfg) {
  const int64_t n = static_cast<int64_t>(samples.size());
  if (n < cfg.window)
    throw ShapeError("time", "signal of " + std::to_string(n) + " samples is shorter than one " +
                                 std::to_string(cfg.window) + "-sample analysis window");
  const auto window = periodic_hann(cfg.window);
  const int64_t bins = cfg.n_fft / 2 + 1;

  std::vector<std::vector<double>> power;
  for (int64_t start = 0; start + cfg.window <= n; start += cfg.hop) {
    std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.n_fft), {0.0, 0.0});
    for (int64_t i = 0; i < cfg.window; ++i)
      buf[static_cast<size_t>(i)] = static_cast<double>(samples[static_cast<size_t>(start + i)]) *
                                    static_cast<double>(window[static_cast<size_t>(i)]);
    fft_radix2(buf);
    std::vector<double> row(static_cast<size_t>(bins));
    for (int64_t k = 0; k < bins; ++k) row[static_cast<size_t>(k)] = std::norm(buf[static_cast<size_t>(k)]);
    power.push_back(std::move(row));
  }
  return power;
}

namespace {

// +/-2-frame regression deltas with replicated edges.
std::vector<std::vector<double>> deltas(const std::vector<std::vector<double>>& c) {
  const int64_t frames = static_cast<int64_t>(c.size());
  const int64_t dim = frames ? static_cast<int64_t>(c[0].size()) : 0;
  std::vector<std::vector<double>> d(c.size(), std::vector<double>(static_cast<size_t>(dim), 0.0));
  const double denom = 2.0 * (1.0 + 4.0);  // 2 * sum(n^2)
  auto at = [&](int64_t t) -> const std::vector<double>& {
    return c[static_cast<size_t>(std::clamp<int64_t>(t, 0, frames - 1))];
  };
  for (int64_t t = 0; t < frames; ++t)
    for (int64_t i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (int64_t n = 1; n <= 2; ++n)
        acc += static_cast<double>(n) * (at(t + n)[static_cast<size_t>(i)] - at(t - n)[static_cast<size_t>(i)]);
      d[static_cast<size_t>(t)][static_cast<size_t>(i)] = acc / denom;
    }
  return d;
}

}  // namespace

std::vector<std::vector<double>> mfcc_frames(std::span<const float> samples, const MfccConfig& cfg) {
  const auto power = stft_power(samples, cfg);
  static thread_local std::vector<std::vector<double>> fb_cache;
  static thread_local int64_t fb_mels = -1, fb_fft = -1;
  if (fb_mels != cfg.n_mels || fb_fft != cfg.n_fft) {
    fb_cache = mel_filterbank(cfg);
    fb_mels = cfg.n_mels;
    fb_fft = cfg.n_fft;
  }

  const int64_t frames = static_cast<int64_t>(power.size());
  std::vector<std::vector<double>> mfcc(static_cast<size_t>(frames),
                                        std::vector<double>(static_cast<size_t>(cfg.n_mfcc), 0.0));
  std::vector<double> mel(static_cast<size_t>(cfg.n_mels));
  for (int64_t t = 0; t < frames; ++t) {
    for (int64_t m = 0; m < cfg.n_mels; ++m) {
      const auto& row = fb_cache[static_cast<size_t>(m)];
      double acc = 0.0;
      for (size_t k = 0; k < row.size(); ++k)
        if (row[k] != 0.0) acc += row[k] * power[static_cast<size_t>(t)][k];
      mel[static_cast<size_t>(m)] = std::log(std::max(acc, cfg.log_floor));
    }
    // orthonormal DCT-II
    for (int64_t k = 0; k < cfg.n_mfcc; ++k) {
      double acc = 0.0;
      for (int64_t m = 0; m < cfg.n_mels; ++m)
        acc += mel[static_cast<size_t>(m)] *
               std::cos(kPi * (static_cast<double>(m) + 0.5) * static_cast<double>(k) /
                        static_cast<double>(cfg.n_mels));
      const double scale = k == 0 ? std::sqrt(1.0 / static_cast<double>(cfg.n_mels))
                                  : std::sqrt(2.0 / static_cast<double>(cfg.n_mels));
      mfcc[static_cast<size_t>(t)][static_cast<size_t>(k)] = scale * acc;
    }
  }

  const auto d1 = deltas(mfcc);
  const auto d2 = deltas(d1);

  std::vector<std::vector<double>> out(static_cast<size_t>(frames));
  for (int64_t t = 0; t < frames; ++t) {
    auto& row = out[static_cast<size_t>(t)];
    row.reserve(static_cast<size_t>(3 * cfg.n_mfcc + 1));
    row.insert(row.end(), mfcc[static_cast<size_t>(t)].begin(), mfcc[static_cast<size_t>(t)].end());
    row.insert(row.end(), d1[static_cast<size_t>(t)].begin(), d1[static_cast<size_t>(t)].end());
    row.insert(row.end(), d2[static_cast<size_t>(t)].begin(), d2[static_cast<size_t>(t)].end());
    double rms = 0.0;
    const int64_t start = t * cfg.hop;
    for (int64_t i = 0; i < cfg.window; ++i) {
      const double v = samples[static_cast<size_t>(start + i)];
      rms += v * v;
    }
    row.push_back(std::sqrt(rms / static_cast<double>(cfg.window)));
  }
  return out;
}

std::vector<double> mfcc_features(const Waveform& w, const MfccConfig& cfg) {
  const auto frames = mfcc_frames(w.samples, cfg);
  const int64_t dim = static_cast<int64_t>(frames[0].size());
  const double n = static_cast<double>(frames.size());

  std::vector<double> mean(static_cast<size_t>(dim), 0.0), sd(static_cast<size_t>(dim), 0.0);
  for (const auto& f : frames)
    for (int64_t i = 0; i < dim; ++i) mean[static_cast<size_t>(i)] += f[static_cast<size_t>(i)];
  for (auto& v : mean) v /= n;
  for (const auto& f : frames)
    for (int64_t i = 0; i < dim; ++i) {
      const double d = f[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)];
      sd[static_cast<size_t>(i)] += d * d;
    }
  for (auto& v : sd) v = std::sqrt(v / n);

  std::vector<double> out;
  out.reserve(static_cast<size_t>(2 * dim));
  out.insert(out.end(), mean.begin(), mean.end());
  out.insert(out.end(), sd.begin(), sd.end());
  return out;
}

}  // namespace voxflow
