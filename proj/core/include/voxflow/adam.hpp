// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <vector>

#include "voxflow/tensor.hpp"

namespace voxflow {

// Adam with bias correction. Moment buffers are laid out in the same order
// as the parameter list handed to init(); that order must stay stable for
// the lifetime of the state (checkpointing relies on it too).
template <class T>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step_count = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  void init(const std::vector<ParamView<T>>& params) {
    first_moment.clear();
    second_moment.clear();
    for (const auto& p : params) {
      first_moment.emplace_back(p.size, T(0));
      second_moment.emplace_back(p.size, T(0));
    }
    step_count = 0;
  }

  bool initialized() const { return !first_moment.empty(); }
};

template <class T>
void adam_step(AdamState<T>& state, std::vector<ParamView<T>>& params) {
  if (state.lr <= 0) throw ConfigError("adam learning rate must be > 0, got " + std::to_string(state.lr));
  if (!state.initialized()) state.init(params);
  if (state.first_moment.size() != params.size())
    throw StateError("adam state holds " + std::to_string(state.first_moment.size()) +
                     " parameters, step got " + std::to_string(params.size()));

  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    if (static_cast<int64_t>(m.size()) != params[p].size)
      throw StateError("adam moment shape mismatch for " + params[p].name);
    T* val = params[p].value;
    const T* g = params[p].grad;
    for (int64_t i = 0; i < params[p].size; ++i) {
      m[i] = static_cast<T>(state.beta1 * m[i] + (1.0 - state.beta1) * g[i]);
      v[i] = static_cast<T>(state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      val[i] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

}  // namespace voxflow
