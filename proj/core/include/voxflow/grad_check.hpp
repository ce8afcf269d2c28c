// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "voxflow/rng.hpp"
#include "voxflow/tensor.hpp"

namespace voxflow {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int64_t coords_checked = 0;
  bool aborted = false;
  std::string diagnostic;

  bool passed(double rel_tol) const { return !aborted && max_rel_err < rel_tol; }
};

struct GradCheckOptions {
  double step = 1e-5;        // central-difference half step
  int64_t max_coords = 256;  // sampled coordinates when the model is larger
  uint64_t seed = 0xC0FFEE;
};

// Central finite differences against analytic gradients, double precision.
//
//   loss_with_grad — zeroes gradients, runs forward+backward, returns loss
//   loss_only      — runs forward only, returns loss
//   params         — parameters whose gradients are compared
//
// When the total coordinate count exceeds opts.max_coords a deterministic
// sample is drawn, at least one coordinate per parameter so every tensor is
// covered. Relative error per coordinate:
//   |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)
inline GradCheckReport grad_check(const std::function<double()>& loss_with_grad,
                                  const std::function<double()>& loss_only,
                                  std::vector<ParamView<double>> params, double /*rel_tol*/,
                                  GradCheckOptions opts = {}) {
  GradCheckReport report;

  const double f0 = loss_with_grad();
  if (!std::isfinite(f0)) {
    report.aborted = true;
    report.diagnostic = "loss is non-finite at the evaluation point: " + std::to_string(f0);
    return report;
  }
  // Snapshot analytic gradients before perturbation runs overwrite them.
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.emplace_back(p.grad, p.grad + p.size);

  // Coordinate sample: everything if small, else a seeded subset with at
  // least one coordinate from every parameter.
  std::vector<std::pair<size_t, int64_t>> coords;
  int64_t total = 0;
  for (const auto& p : params) total += p.size;
  if (total <= opts.max_coords) {
    for (size_t pi = 0; pi < params.size(); ++pi)
      for (int64_t i = 0; i < params[pi].size; ++i) coords.emplace_back(pi, i);
  } else {
    Rng rng(opts.seed);
    for (size_t pi = 0; pi < params.size(); ++pi)
      coords.emplace_back(pi, static_cast<int64_t>(rng.uniform_index(params[pi].size)));
    while (static_cast<int64_t>(coords.size()) < opts.max_coords) {
      const size_t pi = static_cast<size_t>(rng.uniform_index(params.size()));
      coords.emplace_back(pi, static_cast<int64_t>(rng.uniform_index(params[pi].size)));
    }
  }

  const double h = opts.step;
  for (const auto& [pi, i] : coords) {
    double* slot = params[pi].value + i;
    const double saved = *slot;
    *slot = saved + h;
    const double fp = loss_only();
    *slot = saved - h;
    const double fm = loss_only();
    *slot = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      report.aborted = true;
      report.diagnostic = "loss non-finite while perturbing " + params[pi].name + "[" +
                          std::to_string(i) + "]";
      return report;
    }
    const double g_fd = (fp - fm) / (2.0 * h);
    const double g_a = analytic[pi][static_cast<size_t>(i)];
    const double denom = std::max({std::abs(g_a), std::abs(g_fd), 1e-8});
    const double rel = std::abs(g_a - g_fd) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = params[pi].name;
      report.worst_index = i;
      report.worst_analytic = g_a;
      report.worst_numeric = g_fd;
    }
    report.coords_checked += 1;
  }
  return report;
}

}  // namespace voxflow
