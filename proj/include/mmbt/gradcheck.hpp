// Central finite-difference verification of reverse-mode gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmbt/layers.hpp"

namespace mmbt {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Entries probed per leaf; 0 probes every entry.
  std::size_t max_entries_per_leaf = 0;
  /// Denominator floor so near-zero gradients are compared absolutely.
  double floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_leaf;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;

  bool passed(double tol) const { return max_rel_error < tol; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss_fn` must rebuild the graph from the leaves on every call.
inline GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss_fn,
                                 const ParamList<double>& leaves,
                                 const GradCheckOptions& opts = {}) {
  for (const auto& leaf : leaves) {
    auto t = leaf.tensor;
    t.zero_grad();
  }
  backward(loss_fn());

  GradCheckResult result;
  Rng rng(opts.seed);
  NoGradGuard no_grad;
  for (const auto& leaf : leaves) {
    auto t = leaf.tensor;
    const std::size_t n = t.size();
    std::vector<std::size_t> entries;
    if (opts.max_entries_per_leaf == 0 || opts.max_entries_per_leaf >= n) {
      entries.resize(n);
      for (std::size_t i = 0; i < n; ++i) entries[i] = i;
    } else {
      for (std::size_t k = 0; k < opts.max_entries_per_leaf; ++k) entries.push_back(rng.index(n));
    }
    for (auto i : entries) {
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const double saved = t.mutable_values()[i];
      t.mutable_values()[i] = saved + opts.eps;
      const double up = loss_fn().item();
      t.mutable_values()[i] = saved - opts.eps;
      const double down = loss_fn().item();
      t.mutable_values()[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double err = relative_error(analytic, numeric, opts.floor);
      ++result.entries_checked;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_leaf = leaf.name;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mmbt
