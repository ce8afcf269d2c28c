// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace voxflow {

// Base class for everything voxflow throws on purpose.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/argument dimension mismatch. `axis` names the offending axis
// ("batch", "channels", "time", "width", "groups", ...).
class ShapeError : public Error {
 public:
  ShapeError(std::string axis, const std::string& msg)
      : Error("shape error [" + axis + "]: " + msg), axis_(std::move(axis)) {}
  const std::string& axis() const { return axis_; }

 private:
  std::string axis_;
};

// LU factorization hit a pivot below the singularity threshold.
class SingularMatrixError : public Error {
 public:
  SingularMatrixError(int64_t pivot_index, double pivot_magnitude)
      : Error("singular matrix: pivot " + std::to_string(pivot_index) +
              " has magnitude " + std::to_string(pivot_magnitude)),
        pivot_index_(pivot_index),
        pivot_magnitude_(pivot_magnitude) {}
  int64_t pivot_index() const { return pivot_index_; }
  double pivot_magnitude() const { return pivot_magnitude_; }

 private:
  int64_t pivot_index_;
  double pivot_magnitude_;
};

// Bad user-facing configuration (hyperparameters, config keys, CLI flags).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// Operation called in the wrong lifecycle state (double init, missing init).
class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};

// Malformed external file (WAV, checkpoint, manifest). Carries the byte
// offset where parsing gave up when that is known, -1 otherwise.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg, int64_t offset = -1)
      : Error(offset >= 0 ? "format error at offset " + std::to_string(offset) + ": " + msg
                          : "format error: " + msg),
        offset_(offset) {}
  int64_t offset() const { return offset_; }

 private:
  int64_t offset_ = -1;
};

// I/O failure; message carries the path.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Forward/backward produced a non-finite value. Diagnostics attached by the
// thrower (e.g. a per-layer log-det dump).
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& msg) : Error("non-finite value: " + msg) {}
};

}  // namespace voxflow
