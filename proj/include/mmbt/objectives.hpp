// Training objectives: supervised cross-modal and intra-modal contrastive
// losses over projected, L2-normalised class embeddings, classification
// cross-entropy, and their weighted sum.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmbt/layers.hpp"

namespace mmbt {

using Labels = std::vector<std::size_t>;

/// Projection to the contrastive space; output rows are unit length.
template <typename T>
struct ProjectionHead {
  Linear<T> linear;

  static ProjectionHead create(std::size_t in, std::size_t out, Rng& rng) {
    return {Linear<T>::create(in, out, rng)};
  }
  std::size_t out_features() const { return linear.out_features(); }
  Tensor<T> operator()(const Tensor<T>& x) const { return normalize_rows(linear(x)); }
  void collect(ParamList<T>& out, std::string_view prefix) const { linear.collect(out, prefix); }
};

namespace detail {

inline void check_batch(std::size_t rows_a, std::size_t rows_b, const Labels& labels,
                        const char* op) {
  if (rows_a != rows_b || rows_a != labels.size()) {
    throw DimensionError(std::string(op) + ": " + std::to_string(rows_a) + " anchors, " +
                         std::to_string(rows_b) + " candidates, " +
                         std::to_string(labels.size()) + " labels");
  }
  if (rows_a < 2) throw InputError(std::string(op) + ": batch of at least 2 required");
}

}  // namespace detail

/// Mean over anchors i of -(1/|P(i)|) sum_{p in P(i)} log softmax_j(z_i . c_j / tau)[p],
/// with P(i) = { j : labels[j] == labels[i] }. Rows of both inputs are unit vectors.
template <typename T>
Tensor<T> supcon(const Tensor<T>& anchors, const Tensor<T>& candidates, const Labels& labels,
                 T tau) {
  detail::check_batch(anchors.dim(0), candidates.dim(0), labels, "contrastive loss");
  const std::size_t b = labels.size();
  auto logp = log_softmax_rows(scale(matmul(anchors, transpose(candidates)), T(1) / tau));
  std::vector<T> w(b * b, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t positives = 0;
    for (std::size_t j = 0; j < b; ++j) positives += labels[j] == labels[i];
    if (positives == 0) throw InputError("contrastive loss: anchor without positives");
    for (std::size_t j = 0; j < b; ++j) {
      if (labels[j] == labels[i]) w[i * b + j] = T(-1) / static_cast<T>(positives * b);
    }
  }
  return weighted_sum(logp, std::move(w));
}

/// Both directions of supcon averaged.
template <typename T>
Tensor<T> symmetric_supcon(const Tensor<T>& x, const Tensor<T>& y, const Labels& labels, T tau) {
  return scale(add(supcon(x, y, labels, tau), supcon(y, x, labels, tau)), T(0.5));
}

/// Supervised audio-video contrastive loss; positives are same-class pairs.
template <typename T>
Tensor<T> avc_loss(const Tensor<T>& audio_cls, const Tensor<T>& video_cls, const Labels& labels,
                   const ProjectionHead<T>& g_a, const ProjectionHead<T>& g_v, T tau) {
  return symmetric_supcon(g_a(audio_cls), g_v(video_cls), labels, tau);
}

/// Instance alignment: the only positive of sample i is its own pair.
template <typename T>
Tensor<T> alignment_loss(const Tensor<T>& audio_cls, const Tensor<T>& video_cls,
                         const ProjectionHead<T>& g_a, const ProjectionHead<T>& g_v, T tau) {
  Labels own(audio_cls.dim(0));
  for (std::size_t i = 0; i < own.size(); ++i) own[i] = i;
  return symmetric_supcon(g_a(audio_cls), g_v(video_cls), own, tau);
}

/// Intra-modality loss between two augmented views through one head. Anchors
/// are contrasted only against the other view, so an anchor never meets its
/// own projection in a denominator.
template <typename T>
Tensor<T> imc_loss(const Tensor<T>& view1_cls, const Tensor<T>& view2_cls, const Labels& labels,
                   const ProjectionHead<T>& g, T tau) {
  return symmetric_supcon(g(view1_cls), g(view2_cls), labels, tau);
}

/// Mean -log softmax(logits)[label].
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, const Labels& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("ce_loss: logits " + shape_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (c < 2) throw InputError("ce_loss: at least 2 classes required");
  std::vector<T> w(b * c, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw InputError("ce_loss: label " + std::to_string(labels[i]) + " with " +
                       std::to_string(c) + " classes");
    }
    w[i * c + labels[i]] = T(-1) / static_cast<T>(b);
  }
  return weighted_sum(log_softmax_rows(logits), std::move(w));
}

enum class AvcMode { supervised, instance };

struct LossConfig {
  bool avc = true;
  bool imc = true;
  double lambda1 = 0.25;
  double lambda2 = 0.25;
  double tau = 0.07;
  AvcMode avc_mode = AvcMode::supervised;
};

template <typename T>
struct LossBundle {
  Tensor<T> ce, avc, imc_v, imc_a, total;
  double lambda1 = 0.25, lambda2 = 0.25, tau = 0.07;

  double value(const Tensor<T>& t) const { return t.defined() ? static_cast<double>(t.item()) : 0.0; }
};

/// total = ce + lambda1 * avc + lambda2 * (imc_v + imc_a) / 2. Terms left
/// undefined count as zero.
template <typename T>
LossBundle<T> hybrid_loss(const Tensor<T>& ce, const Tensor<T>& avc, const Tensor<T>& imc_v,
                          const Tensor<T>& imc_a, double lambda1 = 0.25, double lambda2 = 0.25,
                          double tau = 0.07) {
  LossBundle<T> b{ce, avc, imc_v, imc_a, ce, lambda1, lambda2, tau};
  if (avc.defined() && lambda1 != 0.0) b.total = add(b.total, scale(avc, static_cast<T>(lambda1)));
  if (imc_v.defined() && imc_a.defined() && lambda2 != 0.0) {
    b.total = add(b.total, scale(add(imc_v, imc_a), static_cast<T>(lambda2 / 2)));
  }
  return b;
}

}  // namespace mmbt
