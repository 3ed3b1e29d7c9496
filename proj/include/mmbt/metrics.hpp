// Classification accuracy and clustering agreement (k-means, ARI, homogeneity).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include "mmbt/random.hpp"
#include "mmbt/tensor.hpp"

namespace mmbt {

using Assignment = std::vector<std::size_t>;
using Embeddings = std::vector<std::vector<double>>;

/// Fraction of rows whose true label is among the k largest scores.
/// Ties are broken towards the lower class index.
inline double top_k_accuracy(const std::vector<std::vector<double>>& scores,
                             const Assignment& labels, std::size_t k) {
  if (scores.size() != labels.size()) throw InputError("top_k_accuracy: size mismatch");
  if (scores.empty()) throw InputError("top_k_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto& row = scores[i];
    if (labels[i] >= row.size()) throw InputError("top_k_accuracy: label out of range");
    std::size_t better = 0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double s = row[c], t = row[labels[i]];
      if (s > t || (s == t && c < labels[i])) ++better;
    }
    hits += better < k;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

struct Contingency {
  std::vector<std::vector<std::uint64_t>> table;  // [class][cluster]
  std::vector<std::uint64_t> class_totals, cluster_totals;
  std::uint64_t n = 0;
};

/// Rows and columns follow the sorted distinct values of each labelling.
inline Contingency contingency(const Assignment& truth, const Assignment& pred) {
  if (truth.size() != pred.size()) throw InputError("contingency: size mismatch");
  std::map<std::size_t, std::size_t> ci, ki;
  for (auto c : truth) ci.emplace(c, 0);
  for (auto k : pred) ki.emplace(k, 0);
  std::size_t r = 0;
  for (auto& [_, idx] : ci) idx = r++;
  r = 0;
  for (auto& [_, idx] : ki) idx = r++;
  Contingency out;
  out.n = truth.size();
  out.table.assign(ci.size(), std::vector<std::uint64_t>(ki.size(), 0));
  out.class_totals.assign(ci.size(), 0);
  out.cluster_totals.assign(ki.size(), 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto a = ci[truth[i]], b = ki[pred[i]];
    ++out.table[a][b];
    ++out.class_totals[a];
    ++out.cluster_totals[b];
  }
  return out;
}

/// Adjusted Rand index (Hubert and Arabie). Two trivial partitions that agree
/// (both a single cluster, or both all singletons) score 1.
inline double adjusted_rand_index(const Assignment& truth, const Assignment& pred) {
  const auto ct = contingency(truth, pred);
  const std::size_t rows = ct.class_totals.size(), cols = ct.cluster_totals.size();
  if (ct.n == 0 || (rows == cols && (rows == 1 || rows == ct.n))) return 1.0;
  auto pairs = [](std::uint64_t x) { return static_cast<double>(x) * (x - 1) / 2.0; };
  double index = 0, sum_a = 0, sum_b = 0;
  for (const auto& row : ct.table)
    for (auto v : row) index += pairs(v);
  for (auto v : ct.class_totals) sum_a += pairs(v);
  for (auto v : ct.cluster_totals) sum_b += pairs(v);
  const double expected = sum_a * sum_b / pairs(ct.n);
  const double max_index = (sum_a + sum_b) / 2.0;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

/// 1 - H(C|K)/H(C), natural logarithms; 1 when the classes have zero entropy.
inline double homogeneity_score(const Assignment& truth, const Assignment& pred) {
  const auto ct = contingency(truth, pred);
  if (ct.n == 0) return 1.0;
  const double n = static_cast<double>(ct.n);
  double h_c = 0;
  for (auto v : ct.class_totals) {
    const double p = v / n;
    h_c -= p * std::log(p);
  }
  if (h_c == 0.0) return 1.0;
  double h_ck = 0;
  for (std::size_t a = 0; a < ct.table.size(); ++a)
    for (std::size_t b = 0; b < ct.cluster_totals.size(); ++b) {
      const auto v = ct.table[a][b];
      if (v == 0) continue;
      h_ck -= (v / n) * std::log(static_cast<double>(v) / ct.cluster_totals[b]);
    }
  return 1.0 - h_ck / h_c;
}

struct KMeansResult {
  Assignment labels;
  Embeddings centroids;
  double inertia = 0;
  std::size_t iterations = 0;
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline KMeansResult kmeans_once(const Embeddings& x, std::size_t k, Rng& rng,
                                std::size_t max_iter) {
  const std::size_t n = x.size();
  KMeansResult r;
  // k-means++ seeding.
  r.centroids.push_back(x[rng.index(n)]);
  std::vector<double> d2(n);
  while (r.centroids.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::infinity();
      for (const auto& c : r.centroids) d2[i] = std::min(d2[i], sq_dist(x[i], c));
      total += d2[i];
    }
    std::size_t pick = rng.index(n);
    if (total > 0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        if (u < d2[pick]) break;
        u -= d2[pick];
      }
    }
    r.centroids.push_back(x[pick]);
  }
  r.labels.assign(n, 0);
  for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
    bool changed = r.iterations == 0;
    r.inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = sq_dist(x[i], r.centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = sq_dist(x[i], r.centroids[c]);
        if (d < bd) bd = d, best = c;
      }
      changed |= best != r.labels[i];
      r.labels[i] = best;
      r.inertia += bd;
    }
    if (!changed) break;
    std::vector<std::size_t> counts(k, 0);
    Embeddings sums(k, std::vector<double>(x[0].size(), 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.labels[i]];
      for (std::size_t j = 0; j < x[i].size(); ++j) sums[r.labels[i]][j] += x[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (auto& v : sums[c]) v /= static_cast<double>(counts[c]);
      r.centroids[c] = std::move(sums[c]);
    }
  }
  return r;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia restart wins.
inline KMeansResult kmeans(const Embeddings& x, std::size_t k, std::uint64_t seed,
                           std::size_t restarts = 10, std::size_t max_iter = 300) {
  if (k < 2) throw InputError("kmeans: k must be at least 2");
  if (x.size() < k) throw InputError("kmeans: fewer samples than clusters");
  for (const auto& row : x)
    if (row.size() != x[0].size()) throw InputError("kmeans: ragged embeddings");
  Rng rng(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    auto run = detail::kmeans_once(x, k, rng, max_iter);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

struct ClusterMetrics {
  double ari = 0, homogeneity = 0;
  Assignment clusters;
};

inline ClusterMetrics cluster_metrics(const Embeddings& x, const Assignment& labels,
                                      std::size_t k, std::uint64_t seed = 0) {
  if (x.size() != labels.size()) throw InputError("cluster_metrics: size mismatch");
  auto km = kmeans(x, k, seed);
  return {adjusted_rand_index(labels, km.labels), homogeneity_score(labels, km.labels),
          std::move(km.labels)};
}

}  // namespace mmbt
