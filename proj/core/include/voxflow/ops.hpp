// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Differentiable kernels. Each forward op has a matching *_backward that
// accumulates (+=) into the supplied gradient buffers; pass nullptr for
// gradients that are not needed. All loops are laid out so the innermost
// axis is time (stride 1).

#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "voxflow/tensor.hpp"

namespace voxflow {

namespace detail {

template <class T>
inline void check_same_shape(const Tensor3<T>& a, const Tensor3<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError("batch", std::string(what) + ": got (" + std::to_string(b.batch()) + "," +
                                  std::to_string(b.channels()) + "," + std::to_string(b.time()) +
                                  "), want (" + std::to_string(a.batch()) + "," +
                                  std::to_string(a.channels()) + "," + std::to_string(a.time()) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv1d: grouped cross-correlation with "same" zero padding.
//   input   (B, Cin, T)
//   kernels (Cout, Cin/groups, W), W odd
//   bias    length Cout
//   output  (B, Cout, T)
// ---------------------------------------------------------------------------

template <class T>
Tensor3<T> conv1d(const Tensor3<T>& input, const Tensor3<T>& kernels, std::span<const T> bias,
                  int64_t groups) {
  const int64_t B = input.batch(), Cin = input.channels(), Tn = input.time();
  const int64_t Cout = kernels.batch(), Kin = kernels.channels(), W = kernels.time();
  if (groups < 1) throw ShapeError("groups", "groups must be >= 1");
  if (Cin % groups != 0)
    throw ShapeError("channels", "input channels " + std::to_string(Cin) +
                                     " not divisible by groups " + std::to_string(groups));
  if (Cout % groups != 0)
    throw ShapeError("channels", "output channels " + std::to_string(Cout) +
                                     " not divisible by groups " + std::to_string(groups));
  if (Kin != Cin / groups)
    throw ShapeError("channels", "kernel fan-in " + std::to_string(Kin) + ", want " +
                                     std::to_string(Cin / groups));
  if (W % 2 == 0) throw ShapeError("width", "kernel width must be odd, got " + std::to_string(W));
  if (static_cast<int64_t>(bias.size()) != Cout)
    throw ShapeError("channels", "bias length " + std::to_string(bias.size()) + ", want " +
                                     std::to_string(Cout));

  const int64_t P = W / 2;
  const int64_t oc_per_g = Cout / groups, ic_per_g = Cin / groups;
  Tensor3<T> out(B, Cout, Tn);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t oc = 0; oc < Cout; ++oc) {
      T* o = out.row(b, oc);
      std::fill(o, o + Tn, bias[oc]);
      const int64_t g = oc / oc_per_g;
      for (int64_t icg = 0; icg < ic_per_g; ++icg) {
        const T* x = input.row(b, g * ic_per_g + icg);
        const T* w = kernels.row(oc, icg);
        for (int64_t k = 0; k < W; ++k) {
          const T wk = w[k];
          const int64_t shift = k - P;
          const int64_t t0 = std::max<int64_t>(0, -shift);
          const int64_t t1 = std::min<int64_t>(Tn, Tn - shift);
          const T* xs = x + shift;
          for (int64_t t = t0; t < t1; ++t) o[t] += wk * xs[t];
        }
      }
    }
  }
  return out;
}

template <class T>
void conv1d_backward(const Tensor3<T>& input, const Tensor3<T>& kernels, int64_t groups,
                     const Tensor3<T>& grad_out, Tensor3<T>* grad_input, Tensor3<T>* grad_kernels,
                     std::span<T> grad_bias) {
  const int64_t B = input.batch(), Cin = input.channels(), Tn = input.time();
  const int64_t Cout = kernels.batch(), W = kernels.time();
  const int64_t P = W / 2;
  const int64_t oc_per_g = Cout / groups, ic_per_g = Cin / groups;
  if (grad_out.batch() != B || grad_out.channels() != Cout || grad_out.time() != Tn)
    throw ShapeError("channels", "grad_out shape does not match conv1d output");

  if (grad_input) {
    detail::check_same_shape(input, *grad_input, "conv1d grad_input");
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t ic = 0; ic < Cin; ++ic) {
        T* gi = grad_input->row(b, ic);
        const int64_t g = ic / ic_per_g, icg = ic % ic_per_g;
        for (int64_t ocg = 0; ocg < oc_per_g; ++ocg) {
          const int64_t oc = g * oc_per_g + ocg;
          const T* go = grad_out.row(b, oc);
          const T* w = kernels.row(oc, icg);
          for (int64_t k = 0; k < W; ++k) {
            const T wk = w[k];
            const int64_t shift = P - k;
            const int64_t t0 = std::max<int64_t>(0, -shift);
            const int64_t t1 = std::min<int64_t>(Tn, Tn - shift);
            const T* gs = go + shift;
            for (int64_t t = t0; t < t1; ++t) gi[t] += wk * gs[t];
          }
        }
      }
    }
  }
  if (grad_kernels) {
    detail::check_same_shape(kernels, *grad_kernels, "conv1d grad_kernels");
    for (int64_t oc = 0; oc < Cout; ++oc) {
      const int64_t g = oc / oc_per_g;
      for (int64_t icg = 0; icg < ic_per_g; ++icg) {
        T* gw = grad_kernels->row(oc, icg);
        for (int64_t k = 0; k < W; ++k) {
          const int64_t shift = k - P;
          const int64_t t0 = std::max<int64_t>(0, -shift);
          const int64_t t1 = std::min<int64_t>(Tn, Tn - shift);
          T acc = 0;
          for (int64_t b = 0; b < B; ++b) {
            const T* go = grad_out.row(b, oc);
            const T* xs = input.row(b, g * ic_per_g + icg) + shift;
            for (int64_t t = t0; t < t1; ++t) acc += go[t] * xs[t];
          }
          gw[k] += acc;
        }
      }
    }
  }
  if (!grad_bias.empty()) {
    for (int64_t oc = 0; oc < Cout; ++oc) {
      T acc = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* go = grad_out.row(b, oc);
        for (int64_t t = 0; t < Tn; ++t) acc += go[t];
      }
      grad_bias[oc] += acc;
    }
  }
}

// ---------------------------------------------------------------------------
// hyperconv: depthwise conv where every batch element carries its own kernel
// set (conditioning-generated weights).
//   input   (B, C, T), kernels (B, C, W), bias (B, C, 1)
// ---------------------------------------------------------------------------

template <class T>
Tensor3<T> hyperconv(const Tensor3<T>& input, const Tensor3<T>& kernels, const Tensor3<T>& bias) {
  const int64_t B = input.batch(), C = input.channels(), Tn = input.time();
  const int64_t W = kernels.time();
  if (kernels.batch() != B || kernels.channels() != C)
    throw ShapeError("channels", "hyperconv kernels must be (B, C, W)");
  if (bias.batch() != B || bias.channels() != C)
    throw ShapeError("channels", "hyperconv bias must be (B, C, 1)");
  if (W % 2 == 0) throw ShapeError("width", "kernel width must be odd");
  const int64_t P = W / 2;

  Tensor3<T> out(B, C, Tn);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      T* o = out.row(b, c);
      std::fill(o, o + Tn, bias.at(b, c));
      const T* x = input.row(b, c);
      const T* w = kernels.row(b, c);
      for (int64_t k = 0; k < W; ++k) {
        const T wk = w[k];
        const int64_t shift = k - P;
        const int64_t t0 = std::max<int64_t>(0, -shift);
        const int64_t t1 = std::min<int64_t>(Tn, Tn - shift);
        const T* xs = x + shift;
        for (int64_t t = t0; t < t1; ++t) o[t] += wk * xs[t];
      }
    }
  }
  return out;
}

template <class T>
void hyperconv_backward(const Tensor3<T>& input, const Tensor3<T>& kernels,
                        const Tensor3<T>& grad_out, Tensor3<T>* grad_input,
                        Tensor3<T>* grad_kernels, Tensor3<T>* grad_bias) {
  const int64_t B = input.batch(), C = input.channels(), Tn = input.time();
  const int64_t W = kernels.time();
  const int64_t P = W / 2;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < C; ++c) {
      const T* go = grad_out.row(b, c);
      const T* x = input.row(b, c);
      const T* w = kernels.row(b, c);
      if (grad_input) {
        T* gi = grad_input->row(b, c);
        for (int64_t k = 0; k < W; ++k) {
          const T wk = w[k];
          const int64_t shift = P - k;
          const int64_t t0 = std::max<int64_t>(0, -shift);
          const int64_t t1 = std::min<int64_t>(Tn, Tn - shift);
          const T* gs = go + shift;
          for (int64_t t = t0; t < t1; ++t) gi[t] += wk * gs[t];
        }
      }
      if (grad_kernels) {
        T* gw = grad_kernels->row(b, c);
        for (int64_t k = 0; k < W; ++k) {
          const int64_t shift = k - P;
          const int64_t t0 = std::max<int64_t>(0, -shift);
          const int64_t t1 = std::min<int64_t>(Tn, Tn - shift);
          const T* xs = x + shift;
          T acc = 0;
          for (int64_t t = t0; t < t1; ++t) acc += go[t] * xs[t];
          gw[k] += acc;
        }
      }
      if (grad_bias) {
        T acc = 0;
        for (int64_t t = 0; t < Tn; ++t) acc += go[t];
        grad_bias->at(b, c) += acc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// channel_matmul: apply a square matrix across the channel axis,
// out[b,:,t] = W * in[b,:,t]. The channel-mixer primitive.
// ---------------------------------------------------------------------------

template <class T>
Tensor3<T> channel_matmul(const Tensor3<T>& input, const Tensor3<T>& W) {
  const int64_t B = input.batch(), C = input.channels(), Tn = input.time();
  if (W.rows() != C || W.cols() != C || W.time() != 1)
    throw ShapeError("channels", "mixer matrix must be (" + std::to_string(C) + "," +
                                     std::to_string(C) + ",1)");
  Tensor3<T> out(B, C, Tn);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < C; ++i) {
      T* o = out.row(b, i);
      for (int64_t j = 0; j < C; ++j) {
        const T wij = W.at(i, j);
        const T* x = input.row(b, j);
        for (int64_t t = 0; t < Tn; ++t) o[t] += wij * x[t];
      }
    }
  }
  return out;
}

template <class T>
void channel_matmul_backward(const Tensor3<T>& input, const Tensor3<T>& W,
                             const Tensor3<T>& grad_out, Tensor3<T>* grad_input,
                             Tensor3<T>* grad_W) {
  const int64_t B = input.batch(), C = input.channels(), Tn = input.time();
  if (grad_input) {
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t j = 0; j < C; ++j) {
        T* gi = grad_input->row(b, j);
        for (int64_t i = 0; i < C; ++i) {
          const T wij = W.at(i, j);
          const T* go = grad_out.row(b, i);
          for (int64_t t = 0; t < Tn; ++t) gi[t] += wij * go[t];
        }
      }
    }
  }
  if (grad_W) {
    for (int64_t i = 0; i < C; ++i) {
      for (int64_t j = 0; j < C; ++j) {
        T acc = 0;
        for (int64_t b = 0; b < B; ++b) {
          const T* go = grad_out.row(b, i);
          const T* x = input.row(b, j);
          for (int64_t t = 0; t < Tn; ++t) acc += go[t] * x[t];
        }
        grad_W->at(i, j) += acc;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// matmul: plain (m,k) x (k,n) -> (m,n) on matrix-shaped tensors.
// ---------------------------------------------------------------------------

template <class T>
Tensor3<T> matmul(const Tensor3<T>& A, const Tensor3<T>& B) {
  const int64_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k)
    throw ShapeError("channels", "matmul inner dims " + std::to_string(k) + " vs " +
                                     std::to_string(B.rows()));
  Tensor3<T> C = Tensor3<T>::matrix(m, n);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const T a = A.at(i, p);
      for (int64_t j = 0; j < n; ++j) C.at(i, j) += a * B.at(p, j);
    }
  }
  return C;
}

template <class T>
void matmul_backward(const Tensor3<T>& A, const Tensor3<T>& B, const Tensor3<T>& grad_C,
                     Tensor3<T>* grad_A, Tensor3<T>* grad_B) {
  const int64_t m = A.rows(), k = A.cols(), n = B.cols();
  if (grad_A) {  // gA = gC * B^T
    for (int64_t i = 0; i < m; ++i)
      for (int64_t p = 0; p < k; ++p) {
        T acc = 0;
        for (int64_t j = 0; j < n; ++j) acc += grad_C.at(i, j) * B.at(p, j);
        grad_A->at(i, p) += acc;
      }
  }
  if (grad_B) {  // gB = A^T * gC
    for (int64_t p = 0; p < k; ++p)
      for (int64_t j = 0; j < n; ++j) {
        T acc = 0;
        for (int64_t i = 0; i < m; ++i) acc += A.at(i, p) * grad_C.at(i, j);
        grad_B->at(p, j) += acc;
      }
  }
}

// ---------------------------------------------------------------------------
// Pointwise kernels and reductions.
// ---------------------------------------------------------------------------

template <class T>
Tensor3<T> sigmoid(const Tensor3<T>& x) {
  Tensor3<T> y(x.batch(), x.channels(), x.time());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
  return y;
}

// grad wrt input from the saved output y.
template <class T>
void sigmoid_backward(const Tensor3<T>& y, const Tensor3<T>& grad_out, Tensor3<T>* grad_in) {
  for (int64_t i = 0; i < y.size(); ++i) (*grad_in)[i] += grad_out[i] * y[i] * (T(1) - y[i]);
}

template <class T>
Tensor3<T> relu(const Tensor3<T>& x) {
  Tensor3<T> y(x.batch(), x.channels(), x.time());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <class T>
void relu_backward(const Tensor3<T>& x, const Tensor3<T>& grad_out, Tensor3<T>* grad_in) {
  for (int64_t i = 0; i < x.size(); ++i) (*grad_in)[i] += x[i] > T(0) ? grad_out[i] : T(0);
}

template <class T>
Tensor3<T> log_elem(const Tensor3<T>& x) {
  Tensor3<T> y(x.batch(), x.channels(), x.time());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = std::log(x[i]);
  return y;
}

template <class T>
void log_elem_backward(const Tensor3<T>& x, const Tensor3<T>& grad_out, Tensor3<T>* grad_in) {
  for (int64_t i = 0; i < x.size(); ++i) (*grad_in)[i] += grad_out[i] / x[i];
}

template <class T>
T sum(const Tensor3<T>& x) {
  T acc = 0;
  for (int64_t i = 0; i < x.size(); ++i) acc += x[i];
  return acc;
}

// d(sum)/dx = 1; accumulate the upstream scalar into every slot.
template <class T>
void sum_backward(T grad_out, Tensor3<T>* grad_in) {
  for (int64_t i = 0; i < grad_in->size(); ++i) (*grad_in)[i] += grad_out;
}

}  // namespace voxflow
