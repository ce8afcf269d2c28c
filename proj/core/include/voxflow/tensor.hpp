// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxflow/errors.hpp"

namespace voxflow {

// Dense (batch, channels, time) array. The same container doubles as a
// matrix (rows, cols, 1) and a flat vector (n, 1, 1) for weights.
template <class T>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int64_t b, int64_t c, int64_t t) : b_(b), c_(c), t_(t) {
    if (b < 0 || c < 0 || t < 0) throw ShapeError("batch", "negative dimension");
    data_.assign(static_cast<size_t>(b) * c * t, T(0));
  }

  static Tensor3 matrix(int64_t rows, int64_t cols) { return Tensor3(rows, cols, 1); }
  static Tensor3 vector(int64_t n) { return Tensor3(n, 1, 1); }

  int64_t batch() const { return b_; }
  int64_t channels() const { return c_; }
  int64_t time() const { return t_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // Matrix-view accessors for (rows, cols, 1) tensors.
  int64_t rows() const { return b_; }
  int64_t cols() const { return c_; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> flat() { return {data_.data(), data_.size()}; }
  std::span<const T> flat() const { return {data_.data(), data_.size()}; }

  T& operator()(int64_t b, int64_t c, int64_t t) { return data_[(b * c_ + c) * t_ + t]; }
  const T& operator()(int64_t b, int64_t c, int64_t t) const { return data_[(b * c_ + c) * t_ + t]; }
  T& at(int64_t b, int64_t c) { return data_[(b * c_ + c) * t_]; }
  const T& at(int64_t b, int64_t c) const { return data_[(b * c_ + c) * t_]; }
  T& operator[](int64_t i) { return data_[i]; }
  const T& operator[](int64_t i) const { return data_[i]; }

  // Pointer to the time row (b, c, :).
  T* row(int64_t b, int64_t c) { return data_.data() + (b * c_ + c) * t_; }
  const T* row(int64_t b, int64_t c) const { return data_.data() + (b * c_ + c) * t_; }

  bool same_shape(const Tensor3& o) const { return b_ == o.b_ && c_ == o.c_ && t_ == o.t_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool all_finite() const {
    for (const T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor3<U> cast() const {
    Tensor3<U> out(b_, c_, t_);
    for (size_t i = 0; i < data_.size(); ++i) out[static_cast<int64_t>(i)] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  int64_t b_ = 0, c_ = 0, t_ = 0;
  std::vector<T> data_;
};

using Tensor3f = Tensor3<float>;
using Tensor3d = Tensor3<double>;

// Learnable parameter: value, gradient of the same shape, and a name path
// used in checkpoints and diagnostics.
template <class T>
struct Param {
  Tensor3<T> value;
  Tensor3<T> grad;
  std::string name;

  Param() = default;
  Param(std::string n, Tensor3<T> v) : value(std::move(v)), name(std::move(n)) {
    grad = Tensor3<T>(value.batch(), value.channels(), value.time());
  }
  void zero_grad() { grad.zero(); }
  int64_t size() const { return value.size(); }
};

// Non-owning view over a parameter; the handle optimizers, checkpoints and
// the gradient checker operate on.
template <class T>
struct ParamView {
  std::string name;
  T* value = nullptr;
  T* grad = nullptr;
  int64_t size = 0;
  int64_t shape[3] = {0, 0, 0};

  static ParamView of(Param<T>& p) {
    return {p.name, p.value.data(), p.grad.data(), p.value.size(),
            {p.value.batch(), p.value.channels(), p.value.time()}};
  }
};

}  // namespace voxflow
