// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "voxflow/toygen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "voxflow/audio.hpp"
#include "voxflow/errors.hpp"
#include "voxflow/rng.hpp"

namespace fs = std::filesystem;

namespace voxflow {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct SpeakerVoice {
  double f0;           // Hz
  double formant1;     // Hz
  double formant2;     // Hz
  double bandwidth1;   // Hz
  double bandwidth2;   // Hz
  double breathiness;  // noise mixed into the excitation
  double tilt;         // spectral tilt of the pulse train (one-pole lowpass)
};

SpeakerVoice voice_for(int speaker) {
  // Distinct pitch/formant/breathiness profiles per speaker index.
  static const SpeakerVoice table[] = {
      {118.0, 640.0, 1090.0, 70.0, 110.0, 0.015, 0.88},
      {215.0, 330.0, 2300.0, 90.0, 160.0, 0.060, 0.70},
      {150.0, 520.0, 1750.0, 80.0, 130.0, 0.035, 0.80},
      {95.0, 740.0, 1350.0, 60.0, 120.0, 0.010, 0.92},
      {260.0, 410.0, 2050.0, 100.0, 170.0, 0.050, 0.60},
      {175.0, 580.0, 900.0, 75.0, 115.0, 0.025, 0.85},
  };
  return table[speaker % 6];
}

// Two-pole resonator state.
struct Resonator {
  double a1, a2, y1 = 0.0, y2 = 0.0;
  Resonator(double freq, double bw, double sr) {
    const double r = std::exp(-kPi * bw / sr);
    a1 = 2.0 * r * std::cos(2.0 * kPi * freq / sr);
    a2 = -r * r;
  }
  double step(double x) {
    const double y = x + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

std::vector<float> synth_utterance(const SpeakerVoice& v, double seconds, int sr, Rng& rng) {
  const int64_t n = static_cast<int64_t>(seconds * sr);
  std::vector<float> out(static_cast<size_t>(n), 0.0f);

  // Syllable plan: bursts of voiced sound separated by near-silence.
  struct Syllable {
    int64_t start, len;
    double glide;  // relative f0 drift over the syllable
  };
  std::vector<Syllable> plan;
  int64_t t = static_cast<int64_t>(rng.uniform(0.02, 0.08) * sr);
  while (t < n - sr / 8) {
    const int64_t len = static_cast<int64_t>(rng.uniform(0.18, 0.45) * sr);
    plan.push_back({t, std::min(len, n - t), rng.uniform(-0.12, 0.12)});
    t += len + static_cast<int64_t>(rng.uniform(0.05, 0.30) * sr);
  }

  for (const auto& syl : plan) {
    Resonator r1(v.formant1 * rng.uniform(0.95, 1.05), v.bandwidth1, sr);
    Resonator r2(v.formant2 * rng.uniform(0.95, 1.05), v.bandwidth2, sr);
    const double f0_base = v.f0 * rng.uniform(0.94, 1.06);
    double phase = rng.uniform(0.0, 1.0);
    double lp = 0.0;

    for (int64_t i = 0; i < syl.len; ++i) {
      const double pos = static_cast<double>(i) / static_cast<double>(syl.len);
      const double vib = 1.0 + 0.02 * std::sin(2.0 * kPi * 5.0 * i / sr);
      const double f0 = f0_base * (1.0 + syl.glide * pos) * vib;

      phase += f0 / sr;
      double excitation = 0.0;
      if (phase >= 1.0) {
        phase -= 1.0;
        excitation = 1.0;
      }
      excitation += v.breathiness * rng.normal();
      // one-pole lowpass shapes the source spectrum (spectral tilt)
      lp = v.tilt * lp + (1.0 - v.tilt) * excitation;

      const double res = r1.step(lp) + 0.7 * r2.step(lp);
      // raised-cosine syllable envelope
      const double env = 0.5 * (1.0 - std::cos(2.0 * kPi * std::min(1.0, pos * 1.02)));
      out[static_cast<size_t>(syl.start + i)] += static_cast<float>(res * env);
    }
  }

  float peak = 0.0f;
  for (const float s : out) peak = std::max(peak, std::abs(s));
  if (peak > 0.0f) {
    const float g = 0.9f / peak;
    for (float& s : out) s *= g;
  }
  return out;
}

}  // namespace

int64_t generate_toy_corpus(const std::string& dir, const ToyCorpusConfig& cfg) {
  if (cfg.n_speakers < 1) throw ConfigError("toy corpus needs at least one speaker");
  fs::create_directories(dir);

  const int64_t per_speaker =
      std::max<int64_t>(1, static_cast<int64_t>(cfg.minutes_per_speaker * 60.0 / cfg.utterance_seconds));

  int64_t written = 0;
  for (int s = 0; s < cfg.n_speakers; ++s) {
    const std::string name = std::string("spk_") + static_cast<char>('a' + s % 26);
    fs::create_directories(fs::path(dir) / name);
    Rng rng(cfg.seed + 7919 * static_cast<uint64_t>(s + 1));
    const SpeakerVoice voice = voice_for(s);

    for (int64_t u = 0; u < per_speaker; ++u) {
      char fname[32];
      std::snprintf(fname, sizeof(fname), "utt_%04d.wav", static_cast<int>(u));
      const fs::path wav_path = fs::path(dir) / name / fname;

      Waveform w;
      w.sample_rate = cfg.sample_rate;
      const double sec = cfg.utterance_seconds * rng.uniform(0.85, 1.15);
      w.samples = synth_utterance(voice, sec, cfg.sample_rate, rng);
      write_wav(wav_path.string(), w);

      // speakers share sentence texts by utterance number
      fs::path txt_path = wav_path;
      txt_path.replace_extension(".txt");
      std::FILE* f = std::fopen(txt_path.string().c_str(), "w");
      if (f) {
        std::fprintf(f, "Toy sentence number %d.\n", static_cast<int>(u));
        std::fclose(f);
      }
      ++written;
    }
  }
  return written;
}

}  // namespace voxflow
