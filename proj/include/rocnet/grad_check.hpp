// Copyright (c) 2026 RocNet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rocnet/tensor.hpp"

namespace rocnet {

struct GradCheckInput {
  std::string name;
  Tensor<double> tensor;
  // 0 checks every element; otherwise this many distinct sampled indices.
  int max_samples = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;

  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
  bool passed() const { return max_rel_error() < tolerance; }
  std::string summary() const {
    std::ostringstream os;
    for (const auto& e : entries) {
      os << (e.max_rel_error < tolerance ? "  ok   " : "  FAIL ") << e.name << "  max_rel_err="
         << e.max_rel_error << " (analytic=" << e.analytic << ", central_diff=" << e.numeric
         << " at index " << e.worst_index << ", " << e.checked << " checked)\n";
    }
    return os.str();
  }
};

// Compares reverse-mode gradients against central finite differences at
// 64-bit precision. `forward` must rebuild the graph on every call: it gets a
// tape (or nullptr for plain evaluation) and returns the scalar loss. Inputs
// are perturbed in place and restored. Reports rather than throws.
// Differences below abs_floor count as agreement: central differences carry
// O(eps_machine/h) rounding noise, which would otherwise swamp the relative
// error of genuinely zero gradients.
inline GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>*)>& forward,
                                  std::vector<GradCheckInput> inputs, double h = 1e-5,
                                  double tolerance = 1e-4, std::uint64_t sample_seed = 20260809,
                                  double abs_floor = 1e-7) {
  GradCheckReport report;
  report.tolerance = tolerance;

  for (auto& in : inputs) {
    in.tensor.set_requires_grad(true);
    in.tensor.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> loss = forward(&tape);
    tape.backward(loss);
  }

  std::mt19937_64 rng(sample_seed);
  for (auto& in : inputs) {
    GradCheckEntry entry;
    entry.name = in.name;
    const std::int64_t n = in.tensor.numel();
    std::vector<std::int64_t> indices;
    if (in.max_samples <= 0 || in.max_samples >= n) {
      indices.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) indices[static_cast<std::size_t>(i)] = i;
    } else {
      std::vector<std::int64_t> all(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
      std::shuffle(all.begin(), all.end(), rng);
      indices.assign(all.begin(), all.begin() + in.max_samples);
    }

    for (std::int64_t idx : indices) {
      double* slot = in.tensor.data() + idx;
      const double saved = *slot;
      *slot = saved + h;
      const double up = forward(nullptr).item();
      *slot = saved - h;
      const double down = forward(nullptr).item();
      *slot = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = in.tensor.grad()[static_cast<std::size_t>(idx)];
      const double diff = std::abs(numeric - analytic);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double rel = diff < abs_floor ? 0.0 : diff / denom;
      ++entry.checked;
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = idx;
        entry.analytic = analytic;
        entry.numeric = numeric;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace rocnet
