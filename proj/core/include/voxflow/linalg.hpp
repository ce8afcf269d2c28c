// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <vector>

#include "voxflow/tensor.hpp"

namespace voxflow {

// Threshold below which an LU pivot is treated as singular.
inline constexpr double kSingularPivot = 1e-12;

template <class T>
struct LuResult {
  double log_abs_det = 0.0;
  int sign = 1;
  Tensor3<T> inverse;  // (n, n, 1)
};

// LU with partial pivoting in double precision; returns log|det|, the sign
// of the determinant, and the inverse. Throws SingularMatrixError with the
// pivot index when a pivot magnitude drops below kSingularPivot.
template <class T>
LuResult<T> lu_det_inverse(const Tensor3<T>& W) {
  const int64_t n = W.rows();
  if (W.cols() != n || W.time() != 1) throw ShapeError("channels", "lu_det_inverse needs a square matrix");

  std::vector<double> lu(static_cast<size_t>(n) * n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) lu[i * n + j] = static_cast<double>(W.at(i, j));

  std::vector<int64_t> perm(n);
  for (int64_t i = 0; i < n; ++i) perm[i] = i;

  double log_abs_det = 0.0;
  int sign = 1;
  for (int64_t k = 0; k < n; ++k) {
    int64_t piv = k;
    double best = std::abs(lu[k * n + k]);
    for (int64_t i = k + 1; i < n; ++i) {
      const double a = std::abs(lu[i * n + k]);
      if (a > best) {
        best = a;
        piv = i;
      }
    }
    if (best < kSingularPivot) throw SingularMatrixError(k, best);
    if (piv != k) {
      for (int64_t j = 0; j < n; ++j) std::swap(lu[k * n + j], lu[piv * n + j]);
      std::swap(perm[k], perm[piv]);
      sign = -sign;
    }
    const double d = lu[k * n + k];
    log_abs_det += std::log(std::abs(d));
    if (d < 0) sign = -sign;
    for (int64_t i = k + 1; i < n; ++i) {
      const double f = lu[i * n + k] / d;
      lu[i * n + k] = f;
      for (int64_t j = k + 1; j < n; ++j) lu[i * n + j] -= f * lu[k * n + j];
    }
  }

  // Solve W x = e_col for every column via the factorization.
  LuResult<T> res;
  res.log_abs_det = log_abs_det;
  res.sign = sign;
  res.inverse = Tensor3<T>::matrix(n, n);
  std::vector<double> y(n);
  for (int64_t col = 0; col < n; ++col) {
    for (int64_t i = 0; i < n; ++i) y[i] = perm[i] == col ? 1.0 : 0.0;
    for (int64_t i = 1; i < n; ++i) {
      double acc = y[i];
      for (int64_t j = 0; j < i; ++j) acc -= lu[i * n + j] * y[j];
      y[i] = acc;
    }
    for (int64_t i = n - 1; i >= 0; --i) {
      double acc = y[i];
      for (int64_t j = i + 1; j < n; ++j) acc -= lu[i * n + j] * y[j];
      y[i] = acc / lu[i * n + i];
    }
    for (int64_t i = 0; i < n; ++i) res.inverse.at(i, col) = static_cast<T>(y[i]);
  }
  return res;
}

}  // namespace voxflow
