// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Single-scale normalizing flow over (B, 1, frame_size) audio frames.
// Every block squeezes time into channels once, then runs n_flows steps of
// mixer -> actnorm -> affine coupling. All couplings are conditioned on one
// shared speaker embedding, adapted per coupling into depthwise kernels for
// the first (hyper) convolution. z keeps the full input dimensionality.

#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "voxflow/linalg.hpp"
#include "voxflow/ops.hpp"
#include "voxflow/rng.hpp"
#include "voxflow/tensor.hpp"

namespace voxflow {

inline constexpr double kLn2Pi = 1.8378770664093454836;

struct FlowConfig {
  int64_t n_blocks = 8;
  int64_t n_flows_per_block = 12;
  int64_t squeeze_factor = 2;
  int64_t coupling_hidden_channels = 512;
  int64_t embedding_dim = 128;
  int64_t frame_size = 4096;
  int64_t n_speakers = 0;
  double scale_eps = 1e-6;

  int64_t channels_at_block(int64_t b) const {
    int64_t c = 1;
    for (int64_t i = 0; i <= b; ++i) c *= squeeze_factor;
    return c;
  }

  void validate() const {
    if (n_blocks < 1 || n_flows_per_block < 1) throw ConfigError("flow needs at least one block and flow");
    if (squeeze_factor < 2) throw ConfigError("squeeze_factor must be >= 2");
    if (n_speakers < 1) throw ConfigError("n_speakers must be >= 1");
    if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
    if (coupling_hidden_channels < 1) throw ConfigError("coupling_hidden_channels must be >= 1");
    if (scale_eps <= 0) throw ConfigError("scale_eps must be > 0");
    int64_t div = 1;
    for (int64_t b = 0; b < n_blocks; ++b) div *= squeeze_factor;
    if (frame_size % div != 0)
      throw ConfigError("frame_size " + std::to_string(frame_size) + " not divisible by squeeze^blocks = " +
                        std::to_string(div));
    for (int64_t b = 0; b < n_blocks; ++b)
      if (channels_at_block(b) % 2 != 0)
        throw ConfigError("coupling needs an even channel count at block " + std::to_string(b));
  }

  bool operator==(const FlowConfig&) const = default;
};

struct LikelihoodReport {
  double logp_prior = 0.0;    // batch mean of per-sample prior log-density
  double logdet_total = 0.0;  // batch mean of accumulated log-determinants
  double per_dim = 0.0;       // (logp_prior + logdet_total) / dim
  int64_t dim = 0;
  std::vector<double> per_sample_per_dim;
};

// ---------------------------------------------------------------------------
// squeeze: (B, C, T) -> (B, s*C, T/s); out[b, s*i + j, t] = in[b, i, s*t + j].
// Pure reindexing, zero log-det.
// ---------------------------------------------------------------------------

template <class T>
Tensor3<T> squeeze(const Tensor3<T>& x, int64_t s = 2) {
  if (x.time() % s != 0)
    throw ShapeError("time", "squeeze needs time divisible by " + std::to_string(s) + ", got " +
                                 std::to_string(x.time()));
  Tensor3<T> out(x.batch(), x.channels() * s, x.time() / s);
  for (int64_t b = 0; b < x.batch(); ++b)
    for (int64_t c = 0; c < x.channels(); ++c) {
      const T* src = x.row(b, c);
      for (int64_t j = 0; j < s; ++j) {
        T* dst = out.row(b, s * c + j);
        for (int64_t t = 0; t < out.time(); ++t) dst[t] = src[s * t + j];
      }
    }
  return out;
}

template <class T>
Tensor3<T> unsqueeze(const Tensor3<T>& x, int64_t s = 2) {
  if (x.channels() % s != 0)
    throw ShapeError("channels", "unsqueeze needs channels divisible by " + std::to_string(s));
  Tensor3<T> out(x.batch(), x.channels() / s, x.time() * s);
  for (int64_t b = 0; b < out.batch(); ++b)
    for (int64_t c = 0; c < out.channels(); ++c) {
      T* dst = out.row(b, c);
      for (int64_t j = 0; j < s; ++j) {
        const T* src = x.row(b, s * c + j);
        for (int64_t t = 0; t < x.time(); ++t) dst[s * t + j] = src[t];
      }
    }
  return out;
}

// Per-step saved activations for the backward pass.
template <class T>
struct StepTape {
  Tensor3<T> mixer_in;
  Tensor3<T> actnorm_in;
  Tensor3<T> h1, h2;
  Tensor3<T> kernels, kbias;
  Tensor3<T> hyper_out, act1, conv1_out, act2;
  Tensor3<T> s_raw, s_prime, t_shift;
};

template <class T>
struct ModelTape {
  Tensor3<T> emb_matrix;  // (emb_dim, B) gathered embedding columns
  std::vector<StepTape<T>> steps;
};

// One step of flow at a fixed channel width C: invertible channel mixer,
// per-channel affine actnorm, and the hyperconditioned affine coupling.
template <class T>
struct FlowStep {
  int64_t channels = 0;  // C (even)
  double scale_eps = 1e-6;

  Param<T> mixer;          // (C, C, 1)
  Param<T> actnorm_scale;  // (C, 1, 1)
  Param<T> actnorm_bias;   // (C, 1, 1)
  bool actnorm_initialized = false;

  Param<T> adapter_weight;  // (4*half, emb_dim, 1)
  Param<T> adapter_bias;    // (4*half, 1, 1)
  Param<T> conv1_weight;    // (hidden, half, 1)
  Param<T> conv1_bias;      // (hidden, 1, 1)
  Param<T> conv2_weight;    // (2*half, hidden, 3), zero-initialized for training
  Param<T> conv2_bias;      // (2*half, 1, 1)

  // Mixer factorization cache for inference; refreshed when stale.
  mutable uint64_t lu_version = ~0ull;
  mutable LuResult<T> lu;

  int64_t half() const { return channels / 2; }

  void ensure_lu(uint64_t version) const {
    if (lu_version != version) {
      lu = lu_det_inverse(mixer.value);
      lu_version = version;
    }
  }

  // --- mixer ---------------------------------------------------------------

  Tensor3<T> mixer_forward(const Tensor3<T>& h, uint64_t version, std::vector<double>* logdet) const {
    ensure_lu(version);
    const double contrib = static_cast<double>(h.time()) * lu.log_abs_det;
    for (auto& ld : *logdet) ld += contrib;
    return channel_matmul(h, mixer.value);
  }

  Tensor3<T> mixer_inverse(const Tensor3<T>& h, uint64_t version) const {
    ensure_lu(version);
    return channel_matmul(h, lu.inverse);
  }

  // --- actnorm ---------------------------------------------------------------

  Tensor3<T> actnorm_forward(const Tensor3<T>& h, std::vector<double>* logdet) const {
    if (!actnorm_initialized) throw StateError("actnorm used before initialization");
    double sum_log = 0.0;
    for (int64_t c = 0; c < channels; ++c) {
      const double s = static_cast<double>(actnorm_scale.value[c]);
      if (std::abs(s) < 1e-12) throw StateError("degenerate actnorm scale at channel " + std::to_string(c));
      sum_log += std::log(std::abs(s));
    }
    const double contrib = static_cast<double>(h.time()) * sum_log;
    for (auto& ld : *logdet) ld += contrib;

    Tensor3<T> out(h.batch(), channels, h.time());
    for (int64_t b = 0; b < h.batch(); ++b)
      for (int64_t c = 0; c < channels; ++c) {
        const T s = actnorm_scale.value[c], bb = actnorm_bias.value[c];
        const T* src = h.row(b, c);
        T* dst = out.row(b, c);
        for (int64_t t = 0; t < h.time(); ++t) dst[t] = s * (src[t] + bb);
      }
    return out;
  }

  Tensor3<T> actnorm_inverse(const Tensor3<T>& h) const {
    Tensor3<T> out(h.batch(), channels, h.time());
    for (int64_t b = 0; b < h.batch(); ++b)
      for (int64_t c = 0; c < channels; ++c) {
        const T s = actnorm_scale.value[c], bb = actnorm_bias.value[c];
        const T* src = h.row(b, c);
        T* dst = out.row(b, c);
        for (int64_t t = 0; t < h.time(); ++t) dst[t] = src[t] / s - bb;
      }
    return out;
  }

  // Data-dependent init: bias = -mean, scale = 1/(std + 1e-6) per channel
  // over (batch, time). Returns warnings for degenerate channels.
  std::vector<std::string> actnorm_init(const Tensor3<T>& h) {
    if (actnorm_initialized) throw StateError("actnorm initialized twice");
    std::vector<std::string> warnings;
    const double n = static_cast<double>(h.batch() * h.time());
    for (int64_t c = 0; c < channels; ++c) {
      double mean = 0.0;
      for (int64_t b = 0; b < h.batch(); ++b) {
        const T* src = h.row(b, c);
        for (int64_t t = 0; t < h.time(); ++t) mean += src[t];
      }
      mean /= n;
      double var = 0.0;
      for (int64_t b = 0; b < h.batch(); ++b) {
        const T* src = h.row(b, c);
        for (int64_t t = 0; t < h.time(); ++t) var += (src[t] - mean) * (src[t] - mean);
      }
      var /= n;
      const double sd = std::sqrt(var);
      if (sd == 0.0) warnings.push_back("constant channel " + std::to_string(c) + " in actnorm init");
      actnorm_bias.value[c] = static_cast<T>(-mean);
      actnorm_scale.value[c] = static_cast<T>(1.0 / (sd + 1e-6));
    }
    actnorm_initialized = true;
    return warnings;
  }

  // --- hyperconditioning -----------------------------------------------------

  // Adapter output layout, per batch column: rows [0, 3*half) are the
  // width-3 depthwise kernels (channel-major), rows [3*half, 4*half) the
  // per-channel biases.
  void hyper_kernels(const Tensor3<T>& emb_matrix, Tensor3<T>* kernels, Tensor3<T>* kbias) const {
    const int64_t B = emb_matrix.cols(), c = half();
    Tensor3<T> k_all = matmul(adapter_weight.value, emb_matrix);  // (4c, B)
    *kernels = Tensor3<T>(B, c, 3);
    *kbias = Tensor3<T>(B, c, 1);
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t k = 0; k < 3; ++k)
          (*kernels)(b, ch, k) = k_all.at(3 * ch + k, b) + adapter_bias.value[3 * ch + k];
        kbias->at(b, ch) = k_all.at(3 * c + ch, b) + adapter_bias.value[3 * c + ch];
      }
    }
  }

  // --- coupling ----------------------------------------------------------------

  // Split h into [h1, h2]; the net maps h1 -> (s_raw, t); h2' = s' (h2 + t)
  // with s' = sigmoid(s_raw + 2) + eps.
  Tensor3<T> coupling_forward(const Tensor3<T>& h, const Tensor3<T>& emb_matrix,
                              std::vector<double>* logdet, StepTape<T>* tape) const {
    const int64_t B = h.batch(), c = half(), Tn = h.time();
    Tensor3<T> h1(B, c, Tn), h2(B, c, Tn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        std::copy(h.row(b, ch), h.row(b, ch) + Tn, h1.row(b, ch));
        std::copy(h.row(b, c + ch), h.row(b, c + ch) + Tn, h2.row(b, ch));
      }

    Tensor3<T> kernels, kbias;
    hyper_kernels(emb_matrix, &kernels, &kbias);

    Tensor3<T> hyper_out = hyperconv(h1, kernels, kbias);
    Tensor3<T> a1 = relu(hyper_out);
    Tensor3<T> conv1_out = conv1d(a1, conv1_weight.value,
                                  std::span<const T>(conv1_bias.value.data(), conv1_bias.size()), 1);
    Tensor3<T> a2 = relu(conv1_out);
    Tensor3<T> conv2_out = conv1d(a2, conv2_weight.value,
                                  std::span<const T>(conv2_bias.value.data(), conv2_bias.size()), 1);

    Tensor3<T> s_raw(B, c, Tn), t_shift(B, c, Tn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        std::copy(conv2_out.row(b, ch), conv2_out.row(b, ch) + Tn, s_raw.row(b, ch));
        std::copy(conv2_out.row(b, c + ch), conv2_out.row(b, c + ch) + Tn, t_shift.row(b, ch));
      }

    Tensor3<T> s_prime(B, c, Tn);
    Tensor3<T> out(B, channels, Tn);
    for (int64_t b = 0; b < B; ++b) {
      double ld = 0.0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* sr = s_raw.row(b, ch);
        const T* hs = h2.row(b, ch);
        const T* ts = t_shift.row(b, ch);
        T* sp = s_prime.row(b, ch);
        T* o2 = out.row(b, c + ch);
        for (int64_t t = 0; t < Tn; ++t) {
          const T s = static_cast<T>(T(1) / (T(1) + std::exp(-(sr[t] + T(2)))) + static_cast<T>(scale_eps));
          sp[t] = s;
          o2[t] = s * (hs[t] + ts[t]);
          ld += std::log(static_cast<double>(s));
        }
        std::copy(h1.row(b, ch), h1.row(b, ch) + Tn, out.row(b, ch));
      }
      (*logdet)[static_cast<size_t>(b)] += ld;
    }

    if (tape) {
      tape->h1 = std::move(h1);
      tape->h2 = std::move(h2);
      tape->kernels = std::move(kernels);
      tape->kbias = std::move(kbias);
      tape->hyper_out = std::move(hyper_out);
      tape->act1 = std::move(a1);
      tape->conv1_out = std::move(conv1_out);
      tape->act2 = std::move(a2);
      tape->s_raw = std::move(s_raw);
      tape->s_prime = std::move(s_prime);
      tape->t_shift = std::move(t_shift);
    }
    return out;
  }

  Tensor3<T> coupling_inverse(const Tensor3<T>& h, const Tensor3<T>& emb_matrix) const {
    const int64_t B = h.batch(), c = half(), Tn = h.time();
    Tensor3<T> h1(B, c, Tn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) std::copy(h.row(b, ch), h.row(b, ch) + Tn, h1.row(b, ch));

    Tensor3<T> kernels, kbias;
    hyper_kernels(emb_matrix, &kernels, &kbias);
    Tensor3<T> a1 = relu(hyperconv(h1, kernels, kbias));
    Tensor3<T> a2 = relu(conv1d(a1, conv1_weight.value,
                                std::span<const T>(conv1_bias.value.data(), conv1_bias.size()), 1));
    Tensor3<T> conv2_out = conv1d(a2, conv2_weight.value,
                                  std::span<const T>(conv2_bias.value.data(), conv2_bias.size()), 1);

    Tensor3<T> out(B, channels, Tn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* sr = conv2_out.row(b, ch);
        const T* ts = conv2_out.row(b, c + ch);
        const T* h2p = h.row(b, c + ch);
        T* o = out.row(b, c + ch);
        for (int64_t t = 0; t < Tn; ++t) {
          const T s = static_cast<T>(T(1) / (T(1) + std::exp(-(sr[t] + T(2)))) + static_cast<T>(scale_eps));
          o[t] = h2p[t] / s - ts[t];
        }
        std::copy(h1.row(b, ch), h1.row(b, ch) + Tn, out.row(b, ch));
      }
    return out;
  }

  std::vector<ParamView<T>> parameters() {
    return {ParamView<T>::of(mixer),          ParamView<T>::of(actnorm_scale),
            ParamView<T>::of(actnorm_bias),   ParamView<T>::of(adapter_weight),
            ParamView<T>::of(adapter_bias),   ParamView<T>::of(conv1_weight),
            ParamView<T>::of(conv1_bias),     ParamView<T>::of(conv2_weight),
            ParamView<T>::of(conv2_bias)};
  }
};

template <class T>
class FlowModel {
 public:
  struct ForwardResult {
    Tensor3<T> z;  // (B, C_final, T_final); same total dimensionality as x
    LikelihoodReport report;
  };

  explicit FlowModel(FlowConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    embeddings_ = Param<T>("embeddings", Tensor3<T>::matrix(cfg_.n_speakers, cfg_.embedding_dim));
    for (int64_t b = 0; b < cfg_.n_blocks; ++b) {
      const int64_t C = cfg_.channels_at_block(b);
      for (int64_t f = 0; f < cfg_.n_flows_per_block; ++f) {
        FlowStep<T> step;
        step.channels = C;
        step.scale_eps = cfg_.scale_eps;
        const int64_t half = C / 2;
        const std::string prefix = "block" + std::to_string(b) + ".flow" + std::to_string(f) + ".";
        step.mixer = Param<T>(prefix + "mixer", Tensor3<T>::matrix(C, C));
        step.actnorm_scale = Param<T>(prefix + "actnorm.scale", Tensor3<T>::vector(C));
        step.actnorm_bias = Param<T>(prefix + "actnorm.bias", Tensor3<T>::vector(C));
        step.adapter_weight =
            Param<T>(prefix + "coupling.adapter.weight", Tensor3<T>::matrix(4 * half, cfg_.embedding_dim));
        step.adapter_bias = Param<T>(prefix + "coupling.adapter.bias", Tensor3<T>::vector(4 * half));
        step.conv1_weight =
            Param<T>(prefix + "coupling.conv1.weight", Tensor3<T>(cfg_.coupling_hidden_channels, half, 1));
        step.conv1_bias =
            Param<T>(prefix + "coupling.conv1.bias", Tensor3<T>::vector(cfg_.coupling_hidden_channels));
        step.conv2_weight =
            Param<T>(prefix + "coupling.conv2.weight", Tensor3<T>(C, cfg_.coupling_hidden_channels, 3));
        step.conv2_bias = Param<T>(prefix + "coupling.conv2.bias", Tensor3<T>::vector(C));
        for (int64_t i = 0; i < C; ++i) {
          step.mixer.value.at(i, i) = T(1);
          step.actnorm_scale.value[i] = T(1);
        }
        steps_.push_back(std::move(step));
      }
    }
  }

  const FlowConfig& config() const { return cfg_; }
  Param<T>& embeddings() { return embeddings_; }
  const Param<T>& embeddings() const { return embeddings_; }
  std::vector<FlowStep<T>>& steps() { return steps_; }
  int64_t step_count() const { return static_cast<int64_t>(steps_.size()); }

  // Fresh-training initialization: orthogonal mixers, Kaiming-style conv1,
  // zeroed final coupling conv, unit-normal embeddings. ActNorm stays
  // data-dependent (call actnorm_init_batch before training).
  void init_for_training(uint64_t seed) {
    Rng rng(seed);
    init_embeddings(rng, 1.0);
    for (auto& step : steps_) {
      orthogonal(rng, &step.mixer.value);
      const double k_ad = 1.0 / std::sqrt(static_cast<double>(cfg_.embedding_dim));
      uniform_fill(rng, &step.adapter_weight.value, k_ad);
      uniform_fill(rng, &step.adapter_bias.value, k_ad);
      const double k1 = 1.0 / std::sqrt(static_cast<double>(step.half()));
      uniform_fill(rng, &step.conv1_weight.value, k1);
      uniform_fill(rng, &step.conv1_bias.value, k1);
      step.conv2_weight.value.zero();
      step.conv2_bias.value.zero();
      step.actnorm_initialized = false;
      for (int64_t c = 0; c < step.channels; ++c) {
        step.actnorm_scale.value[c] = T(1);
        step.actnorm_bias.value[c] = T(0);
      }
    }
    bump_version();
  }

  // Random parameters for invertibility/oracle tests: everything noised,
  // including the final coupling conv; actnorm marked initialized.
  void randomize(uint64_t seed, double conv2_scale = 0.05, double mixer_noise = 0.2,
                 double actnorm_noise = 0.1) {
    init_for_training(seed);
    Rng rng(seed + 1);
    for (auto& step : steps_) {
      for (int64_t i = 0; i < step.mixer.value.size(); ++i)
        step.mixer.value[i] += static_cast<T>(mixer_noise * rng.normal() /
                                              std::sqrt(static_cast<double>(step.channels)));
      for (int64_t i = 0; i < step.conv2_weight.value.size(); ++i)
        step.conv2_weight.value[i] = static_cast<T>(conv2_scale * rng.normal());
      for (int64_t i = 0; i < step.conv2_bias.value.size(); ++i)
        step.conv2_bias.value[i] = static_cast<T>(conv2_scale * rng.normal());
      for (int64_t c = 0; c < step.channels; ++c) {
        step.actnorm_scale.value[c] = static_cast<T>(std::exp(actnorm_noise * rng.normal()));
        step.actnorm_bias.value[c] = static_cast<T>(actnorm_noise * rng.normal());
      }
      step.actnorm_initialized = true;
    }
    bump_version();
  }

  // Exact-identity configuration (useful for synthesis smoke tests): unit
  // mixers and actnorm, zeroed couplings and embeddings.
  void init_identity() {
    for (auto& step : steps_) {
      step.mixer.value.zero();
      for (int64_t i = 0; i < step.channels; ++i) step.mixer.value.at(i, i) = T(1);
      for (int64_t c = 0; c < step.channels; ++c) {
        step.actnorm_scale.value[c] = T(1);
        step.actnorm_bias.value[c] = T(0);
      }
      step.actnorm_initialized = true;
      step.adapter_weight.value.zero();
      step.adapter_bias.value.zero();
      step.conv1_weight.value.zero();
      step.conv1_bias.value.zero();
      step.conv2_weight.value.zero();
      step.conv2_bias.value.zero();
    }
    embeddings_.value.zero();
    bump_version();
  }

  std::vector<ParamView<T>> parameters() {
    std::vector<ParamView<T>> out;
    out.push_back(ParamView<T>::of(embeddings_));
    for (auto& step : steps_)
      for (auto& p : step.parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    embeddings_.zero_grad();
    for (auto& step : steps_)
      for (auto p : step.parameters()) std::fill(p.grad, p.grad + p.size, T(0));
  }

  // Parameter mutation invalidates the mixer factorization caches.
  void bump_version() { ++param_version_; }
  uint64_t param_version() const { return param_version_; }

  bool actnorm_initialized() const {
    for (const auto& step : steps_)
      if (!step.actnorm_initialized) return false;
    return true;
  }

  // Sequential data-dependent ActNorm init: the batch is propagated through
  // already-initialized layers so each actnorm sees unit-variance input.
  std::vector<std::string> actnorm_init_batch(const Tensor3<T>& x, std::span<const int> speakers) {
    if (actnorm_initialized()) throw StateError("actnorm already initialized");
    std::vector<std::string> warnings;
    Tensor3<T> emb = gather_embeddings(speakers);
    std::vector<double> logdet(static_cast<size_t>(x.batch()), 0.0);
    Tensor3<T> h = x;
    size_t si = 0;
    for (int64_t b = 0; b < cfg_.n_blocks; ++b) {
      h = squeeze(h, cfg_.squeeze_factor);
      for (int64_t f = 0; f < cfg_.n_flows_per_block; ++f, ++si) {
        auto& step = steps_[si];
        h = step.mixer_forward(h, param_version_, &logdet);
        if (!step.actnorm_initialized) {
          for (const auto& w : step.actnorm_init(h)) warnings.push_back(step.mixer.name + ": " + w);
        }
        h = step.actnorm_forward(h, &logdet);
        h = step.coupling_forward(h, emb, &logdet, nullptr);
      }
    }
    bump_version();
    return warnings;
  }

  ForwardResult forward(const Tensor3<T>& x, std::span<const int> speakers, ModelTape<T>* tape = nullptr) {
    check_speakers(x.batch(), speakers);
    if (!actnorm_initialized()) throw StateError("flow forward before actnorm initialization");

    Tensor3<T> emb = gather_embeddings(speakers);
    if (tape) {
      tape->emb_matrix = emb;
      tape->steps.assign(static_cast<size_t>(step_count()), StepTape<T>{});
    }

    const int64_t B = x.batch();
    std::vector<double> logdet(static_cast<size_t>(B), 0.0);
    last_logdet_breakdown_.clear();

    Tensor3<T> h = x;
    size_t si = 0;
    for (int64_t b = 0; b < cfg_.n_blocks; ++b) {
      h = squeeze(h, cfg_.squeeze_factor);
      for (int64_t f = 0; f < cfg_.n_flows_per_block; ++f, ++si) {
        auto& step = steps_[si];
        StepTape<T>* st = tape ? &tape->steps[si] : nullptr;
        if (st) st->mixer_in = h;
        std::vector<double> before = logdet;
        h = step.mixer_forward(h, param_version_, &logdet);
        note_logdet(step.mixer.name, before, logdet);

        if (st) st->actnorm_in = h;
        before = logdet;
        h = step.actnorm_forward(h, &logdet);
        note_logdet(step.actnorm_scale.name, before, logdet);

        before = logdet;
        h = step.coupling_forward(h, emb, &logdet, st);
        note_logdet(step.conv2_weight.name, before, logdet);
      }
    }

    ForwardResult res;
    res.report.dim = cfg_.frame_size;
    res.report.per_sample_per_dim.resize(static_cast<size_t>(B));
    double mean_prior = 0.0, mean_logdet = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      double lp = 0.0;
      for (int64_t c = 0; c < h.channels(); ++c) {
        const T* row = h.row(b, c);
        for (int64_t t = 0; t < h.time(); ++t)
          lp += -0.5 * (static_cast<double>(row[t]) * static_cast<double>(row[t]) + kLn2Pi);
      }
      mean_prior += lp;
      mean_logdet += logdet[static_cast<size_t>(b)];
      res.report.per_sample_per_dim[static_cast<size_t>(b)] =
          (lp + logdet[static_cast<size_t>(b)]) / static_cast<double>(cfg_.frame_size);
    }
    res.report.logp_prior = mean_prior / static_cast<double>(B);
    res.report.logdet_total = mean_logdet / static_cast<double>(B);
    res.report.per_dim = (res.report.logp_prior + res.report.logdet_total) / static_cast<double>(cfg_.frame_size);
    res.z = std::move(h);
    return res;
  }

  Tensor3<T> inverse(const Tensor3<T>& z, std::span<const int> speakers) {
    check_speakers(z.batch(), speakers);
    if (!actnorm_initialized()) throw StateError("flow inverse before actnorm initialization");
    Tensor3<T> emb = gather_embeddings(speakers);

    Tensor3<T> h = z;
    int64_t si = step_count() - 1;
    for (int64_t b = cfg_.n_blocks - 1; b >= 0; --b) {
      for (int64_t f = cfg_.n_flows_per_block - 1; f >= 0; --f, --si) {
        auto& step = steps_[static_cast<size_t>(si)];
        h = step.coupling_inverse(h, emb);
        h = step.actnorm_inverse(h);
        h = step.mixer_inverse(h, param_version_);
      }
      h = unsqueeze(h, cfg_.squeeze_factor);
    }
    return h;
  }

  // Negative log-likelihood per dimension (training loss), with gradients
  // accumulated into every parameter. loss = -mean_b per_dim_b.
  double nll_backward(const Tensor3<T>& x, std::span<const int> speakers,
                      LikelihoodReport* report_out = nullptr) {
    ModelTape<T> tape;
    ForwardResult fr = forward(x, speakers, &tape);
    if (report_out) *report_out = fr.report;

    const int64_t B = x.batch();
    const double denom = static_cast<double>(B) * static_cast<double>(cfg_.frame_size);
    const double loss = -(fr.report.logp_prior + fr.report.logdet_total) / static_cast<double>(cfg_.frame_size);
    if (!std::isfinite(loss)) throw NonFiniteError("nll loss = " + std::to_string(loss) + "\n" + logdet_dump());

    // dL/dz = z / (B * D); log-det terms enter with lambda = -1/(B * D).
    const double lambda = -1.0 / denom;
    Tensor3<T> gh(fr.z.batch(), fr.z.channels(), fr.z.time());
    for (int64_t i = 0; i < fr.z.size(); ++i) gh[i] = static_cast<T>(static_cast<double>(fr.z[i]) / denom);

    Tensor3<T> grad_emb = Tensor3<T>::matrix(cfg_.embedding_dim, B);

    int64_t si = step_count() - 1;
    for (int64_t b = cfg_.n_blocks - 1; b >= 0; --b) {
      for (int64_t f = cfg_.n_flows_per_block - 1; f >= 0; --f, --si) {
        auto& step = steps_[static_cast<size_t>(si)];
        StepTape<T>& st = tape.steps[static_cast<size_t>(si)];
        gh = coupling_backward(step, st, tape.emb_matrix, gh, lambda, &grad_emb);
        gh = actnorm_backward(step, st, gh, lambda);
        gh = mixer_backward(step, st, gh, lambda);
      }
      gh = unsqueeze(gh, cfg_.squeeze_factor);
    }

    // scatter embedding-column gradients into the table rows
    for (int64_t b = 0; b < B; ++b) {
      const int spk = speakers[static_cast<size_t>(b)];
      for (int64_t e = 0; e < cfg_.embedding_dim; ++e)
        embeddings_.grad.at(spk, e) += grad_emb.at(e, b);
    }
    return loss;
  }

  std::string logdet_dump() const {
    std::string out = "per-layer logdet (batch mean):\n";
    for (const auto& [name, value] : last_logdet_breakdown_)
      out += "  " + name + ": " + std::to_string(value) + "\n";
    return out;
  }

  Tensor3<T> gather_embeddings(std::span<const int> speakers) const {
    Tensor3<T> emb = Tensor3<T>::matrix(cfg_.embedding_dim, static_cast<int64_t>(speakers.size()));
    for (size_t b = 0; b < speakers.size(); ++b)
      for (int64_t e = 0; e < cfg_.embedding_dim; ++e)
        emb.at(e, static_cast<int64_t>(b)) = embeddings_.value.at(speakers[b], e);
    return emb;
  }

 private:
  void check_speakers(int64_t batch, std::span<const int> speakers) const {
    if (static_cast<int64_t>(speakers.size()) != batch)
      throw ShapeError("batch", "speaker ids (" + std::to_string(speakers.size()) +
                                    ") do not match batch " + std::to_string(batch));
    for (const int s : speakers)
      if (s < 0 || s >= cfg_.n_speakers)
        throw ConfigError("speaker id " + std::to_string(s) + " outside [0, " +
                          std::to_string(cfg_.n_speakers) + ")");
  }

  void note_logdet(const std::string& name, const std::vector<double>& before,
                   const std::vector<double>& after) {
    double d = 0.0;
    for (size_t i = 0; i < before.size(); ++i) d += after[i] - before[i];
    last_logdet_breakdown_.emplace_back(name, d / static_cast<double>(before.size()));
  }

  void init_embeddings(Rng& rng, double scale) {
    for (int64_t i = 0; i < embeddings_.value.size(); ++i)
      embeddings_.value[i] = static_cast<T>(scale * rng.normal());
  }

  static void uniform_fill(Rng& rng, Tensor3<T>* t, double k) {
    for (int64_t i = 0; i < t->size(); ++i) t->operator[](i) = static_cast<T>(rng.uniform(-k, k));
  }

  // Random orthogonal matrix via Gram-Schmidt on a Gaussian draw.
  static void orthogonal(Rng& rng, Tensor3<T>* m) {
    const int64_t n = m->rows();
    std::vector<std::vector<double>> q(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n)));
    for (auto& row : q)
      for (auto& v : row) v = rng.normal();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (int64_t k = 0; k < n; ++k) dot += q[i][k] * q[j][k];
        for (int64_t k = 0; k < n; ++k) q[i][k] -= dot * q[j][k];
      }
      double norm = 0.0;
      for (int64_t k = 0; k < n; ++k) norm += q[i][k] * q[i][k];
      norm = std::sqrt(norm);
      if (norm < 1e-9) {  // extraordinarily unlikely; retry the row
        for (int64_t k = 0; k < n; ++k) q[i][k] = rng.normal();
        --i;
        continue;
      }
      for (int64_t k = 0; k < n; ++k) q[i][k] /= norm;
    }
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) m->at(i, j) = static_cast<T>(q[static_cast<size_t>(i)][static_cast<size_t>(j)]);
  }

  // Backward passes; each returns the gradient w.r.t. the step input and
  // accumulates parameter gradients. lambda is dLoss/d(summed logdet).
  Tensor3<T> coupling_backward(FlowStep<T>& step, const StepTape<T>& st, const Tensor3<T>& emb_matrix,
                               const Tensor3<T>& gout, double lambda, Tensor3<T>* grad_emb) {
    const int64_t B = gout.batch(), c = step.half(), Tn = gout.time();

    Tensor3<T> gh1(B, c, Tn), gh2(B, c, Tn);
    Tensor3<T> gs_raw(B, c, Tn), gt(B, c, Tn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* go1 = gout.row(b, ch);
        const T* go2 = gout.row(b, c + ch);
        const T* sp = st.s_prime.row(b, ch);
        const T* h2 = st.h2.row(b, ch);
        const T* ts = st.t_shift.row(b, ch);
        T* g1 = gh1.row(b, ch);
        T* g2 = gh2.row(b, ch);
        T* gs = gs_raw.row(b, ch);
        T* gtr = gt.row(b, ch);
        for (int64_t t = 0; t < Tn; ++t) {
          g1[t] = go1[t];
          g2[t] = go2[t] * sp[t];
          gtr[t] = go2[t] * sp[t];
          // d/ds' of [go2 * s'(h2+t)] plus the log-det term lambda / s'
          const double gsp = static_cast<double>(go2[t]) * (static_cast<double>(h2[t]) + static_cast<double>(ts[t])) +
                             lambda / static_cast<double>(sp[t]);
          const double sig = static_cast<double>(sp[t]) - step.scale_eps;
          gs[t] = static_cast<T>(gsp * sig * (1.0 - sig));
        }
      }

    // conv2 backward over the concatenated (s_raw, t) gradient
    Tensor3<T> gu2(B, 2 * c, Tn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        std::copy(gs_raw.row(b, ch), gs_raw.row(b, ch) + Tn, gu2.row(b, ch));
        std::copy(gt.row(b, ch), gt.row(b, ch) + Tn, gu2.row(b, c + ch));
      }
    Tensor3<T> ga2(B, cfg_.coupling_hidden_channels, Tn);
    conv1d_backward(st.act2, step.conv2_weight.value, 1, gu2, &ga2, &step.conv2_weight.grad,
                    std::span<T>(step.conv2_bias.grad.data(), step.conv2_bias.grad.size()));

    Tensor3<T> gu1(B, cfg_.coupling_hidden_channels, Tn);
    relu_backward(st.conv1_out, ga2, &gu1);
    Tensor3<T> ga1(B, c, Tn);
    conv1d_backward(st.act1, step.conv1_weight.value, 1, gu1, &ga1, &step.conv1_weight.grad,
                    std::span<T>(step.conv1_bias.grad.data(), step.conv1_bias.grad.size()));

    Tensor3<T> gu0(B, c, Tn);
    relu_backward(st.hyper_out, ga1, &gu0);
    Tensor3<T> gkernels(B, c, 3), gkbias(B, c, 1);
    hyperconv_backward(st.h1, st.kernels, gu0, &gh1, &gkernels, &gkbias);

    // adapter backward: fold per-batch kernel grads into the (4c, B) layout
    Tensor3<T> gk_all = Tensor3<T>::matrix(4 * c, B);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t k = 0; k < 3; ++k) gk_all.at(3 * ch + k, b) = gkernels(b, ch, k);
        gk_all.at(3 * c + ch, b) = gkbias.at(b, ch);
      }
    matmul_backward(step.adapter_weight.value, emb_matrix, gk_all, &step.adapter_weight.grad, grad_emb);
    for (int64_t r = 0; r < 4 * c; ++r) {
      T acc = 0;
      for (int64_t b = 0; b < B; ++b) acc += gk_all.at(r, b);
      step.adapter_bias.grad[r] += acc;
    }

    Tensor3<T> gin(B, step.channels, Tn);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        std::copy(gh1.row(b, ch), gh1.row(b, ch) + Tn, gin.row(b, ch));
        std::copy(gh2.row(b, ch), gh2.row(b, ch) + Tn, gin.row(b, c + ch));
      }
    return gin;
  }

  Tensor3<T> actnorm_backward(FlowStep<T>& step, const StepTape<T>& st, const Tensor3<T>& gout,
                              double lambda) {
    const int64_t B = gout.batch(), C = step.channels, Tn = gout.time();
    Tensor3<T> gin(B, C, Tn);
    for (int64_t c = 0; c < C; ++c) {
      const T s = step.actnorm_scale.value[c];
      const T bb = step.actnorm_bias.value[c];
      double gs = lambda * static_cast<double>(B) * static_cast<double>(Tn) / static_cast<double>(s);
      double gb = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const T* go = gout.row(b, c);
        const T* hin = st.actnorm_in.row(b, c);
        T* gi = gin.row(b, c);
        for (int64_t t = 0; t < Tn; ++t) {
          gi[t] = go[t] * s;
          gs += static_cast<double>(go[t]) * (static_cast<double>(hin[t]) + static_cast<double>(bb));
          gb += static_cast<double>(go[t]) * static_cast<double>(s);
        }
      }
      step.actnorm_scale.grad[c] += static_cast<T>(gs);
      step.actnorm_bias.grad[c] += static_cast<T>(gb);
    }
    return gin;
  }

  Tensor3<T> mixer_backward(FlowStep<T>& step, const StepTape<T>& st, const Tensor3<T>& gout,
                            double lambda) {
    const int64_t B = gout.batch(), Tn = gout.time();
    Tensor3<T> gin(B, step.channels, Tn);
    channel_matmul_backward(st.mixer_in, step.mixer.value, gout, &gin, &step.mixer.grad);
    // d(B*T*log|det W|)/dW = B*T*inv(W)^T
    step.ensure_lu(param_version_);
    const double coeff = lambda * static_cast<double>(B) * static_cast<double>(Tn);
    for (int64_t i = 0; i < step.channels; ++i)
      for (int64_t j = 0; j < step.channels; ++j)
        step.mixer.grad.at(i, j) += static_cast<T>(coeff * static_cast<double>(step.lu.inverse.at(j, i)));
    return gin;
  }

  FlowConfig cfg_;
  Param<T> embeddings_;
  std::vector<FlowStep<T>> steps_;
  uint64_t param_version_ = 0;
  std::vector<std::pair<std::string, double>> last_logdet_breakdown_;
};

// Forward with the source identity, inverse with the target identity.
template <class T>
Tensor3<T> convert_frames(FlowModel<T>& model, const Tensor3<T>& x, std::span<const int> src,
                          std::span<const int> tgt) {
  auto fr = model.forward(x, src);
  return model.inverse(fr.z, tgt);
}

}  // namespace voxflow
