// Pooled multiscale self-attention and the transformer block built on it.
//
// One head computes
//   Q = P_Q(A W_Q), K = P_K(A W_K), V = P_V(A W_V)
//   out = Q + softmax((Q K^T + E_rel) / sqrt(d_head)) V
// where E_rel[i][j] = Q_i . sum_axis R_axis[offset_axis(i, j)] and the class
// token never takes part in pooling or relative positions.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mmbt/layers.hpp"
#include "mmbt/schedule.hpp"

namespace mmbt {

/// A class token plus a row-major grid of patch tokens: [has_cls + N x d].
template <typename T>
struct TokenSet {
  Tensor<T> tokens;
  Extents extents;
  bool has_cls = true;

  std::size_t grid_size() const { return numel(extents); }
  std::size_t width() const { return tokens.dim(1); }
  std::size_t rows() const { return tokens.dim(0); }

  Tensor<T> class_token() const {
    if (!has_cls) throw UsageError("token set has no class token");
    return slice_rows(tokens, 0, 1);
  }
  Tensor<T> grid_tokens() const {
    const std::size_t off = has_cls ? 1 : 0;
    return slice_rows(tokens, off, off + grid_size());
  }

  /// Per-axis coordinate of grid token i (0-based, class token excluded).
  Extents coordinates(std::size_t i) const {
    Extents c(extents.size());
    for (std::size_t a = extents.size(); a-- > 0;) {
      c[a] = i % extents[a];
      i /= extents[a];
    }
    return c;
  }

  void check() const {
    if (tokens.rank() != 2 || tokens.dim(0) != grid_size() + (has_cls ? 1 : 0)) {
      throw DimensionError("token set: tensor " + shape_string(tokens.shape()) +
                           " does not hold grid " + shape_string(extents) +
                           (has_cls ? " plus class token" : ""));
    }
  }
};

/// Learned per-axis relative-position embeddings for one head.
template <typename T>
struct RelPosTable {
  std::vector<Tensor<T>> axes;  // axis a: [rows_a x head_dim]

  static RelPosTable zeros(const std::vector<std::size_t>& rows, std::size_t head_dim) {
    RelPosTable t;
    for (auto r : rows) t.axes.push_back(zeros_param<T>({r, head_dim}));
    return t;
  }
};

struct PoolSpec {
  Extents stride;
  PoolMode mode = PoolMode::max;
};

template <typename T>
Tensor<T> apply_pool(const Tensor<T>& x, const Extents& extents, const PoolSpec& pool,
                     bool has_cls) {
  if (pool.stride.empty() || is_identity_stride(pool.stride)) return x;
  return pool_grid(x, extents, pool.stride, pool.mode, has_cls);
}

/// softmax((q k^T + E_rel) / sqrt(d_head)) v, plus q when `residual`.
/// q [n_q x dh], k/v [n_kv x dh] already projected and pooled.
template <typename T>
Tensor<T> pooled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Extents& q_grid, const Extents& kv_grid, bool has_cls,
                           const RelPosTable<T>* rel, bool residual) {
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  auto scores = matmul(q, transpose(k));
  if (rel && !rel->axes.empty()) {
    auto index = RelPosIndex::build(q_grid, kv_grid);
    std::vector<Tensor<T>> qr;
    qr.reserve(rel->axes.size());
    for (const auto& table : rel->axes) qr.push_back(matmul(q, transpose(table)));
    scores = add(scores, rel_pos_bias(qr, index, has_cls));
  }
  auto out = matmul(softmax_rows(scale(scores, inv_scale)), v);
  return residual ? add(out, q) : out;
}

/// One head of multiscale attention from (already normalised) tokens.
template <typename T>
TokenSet<T> msattn_head(const TokenSet<T>& a, const Tensor<T>& w_q, const Tensor<T>& w_k,
                        const Tensor<T>& w_v, const PoolSpec& pool_q, const PoolSpec& pool_k,
                        const PoolSpec& pool_v, const RelPosTable<T>* rel,
                        bool residual = true) {
  a.check();
  const auto q_grid =
      pool_q.stride.empty() ? a.extents : pooled_extents(a.extents, pool_q.stride);
  const auto k_grid =
      pool_k.stride.empty() ? a.extents : pooled_extents(a.extents, pool_k.stride);
  const auto v_grid =
      pool_v.stride.empty() ? a.extents : pooled_extents(a.extents, pool_v.stride);
  if (k_grid != v_grid) {
    throw ConfigError("msattn_head: key grid " + shape_string(k_grid) +
                      " differs from value grid " + shape_string(v_grid));
  }
  auto q = apply_pool(matmul(a.tokens, w_q), a.extents, pool_q, a.has_cls);
  auto k = apply_pool(matmul(a.tokens, w_k), a.extents, pool_k, a.has_cls);
  auto v = apply_pool(matmul(a.tokens, w_v), a.extents, pool_v, a.has_cls);
  return {pooled_attention(q, k, v, q_grid, k_grid, a.has_cls, rel, residual), q_grid,
          a.has_cls};
}

/// Flags shared by every block of one encoder.
struct AttentionStyle {
  bool rel_pos = true;
  bool residual_pooling = true;
  double ln_eps = 1e-6;
};

/// A' = MMSA(LN(A)) + P(A) [projected when the width changes]
/// out = MLP(LN(A')) + A'
template <typename T>
class MultiScaleBlock {
 public:
  MultiScaleBlock() = default;

  MultiScaleBlock(const BlockSpec& spec, const BlockGeometry& geo, const AttentionStyle& style,
                  Rng& rng)
      : spec_(spec), geo_(geo), style_(style) {
    const T eps = static_cast<T>(style.ln_eps);
    norm1_ = LayerNorm<T>::create(geo.d_in, eps);
    qkv_ = Linear<T>::create(geo.d_in, 3 * geo.d_out, rng);
    proj_ = Linear<T>::create(geo.d_out, geo.d_out, rng);
    if (geo.d_in != geo.d_out) skip_proj_ = Linear<T>::create(geo.d_in, geo.d_out, rng);
    norm2_ = LayerNorm<T>::create(geo.d_out, eps);
    mlp_ = Mlp<T>::create(geo.d_out, geo.mlp_hidden, geo.d_out, rng);
    if (style.rel_pos) {
      for (std::size_t h = 0; h < geo.heads; ++h) {
        rel_.push_back(RelPosTable<T>::zeros(geo.rel_rows, geo.head_dim));
      }
    }
  }

  const BlockGeometry& geometry() const { return geo_; }
  const BlockSpec& spec() const { return spec_; }
  Mlp<T>& mlp() { return mlp_; }
  Linear<T>& qkv() { return qkv_; }
  Linear<T>& proj() { return proj_; }
  std::vector<RelPosTable<T>>& rel_tables() { return rel_; }

  /// MMSA(LN(A)) + P(A); the first residual stage.
  TokenSet<T> attention_stage(const TokenSet<T>& a) const {
    a.check();
    if (a.extents != geo_.in_grid || a.width() != geo_.d_in) {
      throw ConfigError("block expects " + std::to_string(geo_.d_in) + "x" +
                        shape_string(geo_.in_grid) + ", got " + std::to_string(a.width()) +
                        "x" + shape_string(a.extents));
    }
    const std::size_t d = geo_.d_out;
    auto qkv = qkv_(norm1_(a.tokens));
    const PoolSpec pq{spec_.q_stride, spec_.q_pool};
    const PoolSpec pkv{spec_.kv_stride, spec_.kv_pool};
    auto q = apply_pool(slice_cols(qkv, 0, d), a.extents, pq, a.has_cls);
    auto k = apply_pool(slice_cols(qkv, d, 2 * d), a.extents, pkv, a.has_cls);
    auto v = apply_pool(slice_cols(qkv, 2 * d, 3 * d), a.extents, pkv, a.has_cls);

    std::vector<Tensor<T>> heads;
    heads.reserve(geo_.heads);
    for (std::size_t h = 0; h < geo_.heads; ++h) {
      const std::size_t b = h * geo_.head_dim, e = b + geo_.head_dim;
      heads.push_back(pooled_attention(slice_cols(q, b, e), slice_cols(k, b, e),
                                       slice_cols(v, b, e), geo_.q_grid, geo_.kv_grid,
                                       a.has_cls, rel_.empty() ? nullptr : &rel_[h],
                                       style_.residual_pooling));
    }
    auto attended = proj_(geo_.heads == 1 ? heads.front() : concat_cols(heads));

    auto skip = apply_pool(a.tokens, a.extents, PoolSpec{spec_.q_stride, spec_.skip_pool},
                           a.has_cls);
    if (skip_proj_) skip = (*skip_proj_)(skip);
    return {add(attended, skip), geo_.q_grid, a.has_cls};
  }

  TokenSet<T> operator()(const TokenSet<T>& a) const {
    auto mid = attention_stage(a);
    return {add(mlp_(norm2_(mid.tokens)), mid.tokens), mid.extents, mid.has_cls};
  }

  void collect(ParamList<T>& out, std::string_view prefix) const {
    norm1_.collect(out, join_name(prefix, "norm1"));
    qkv_.collect(out, join_name(prefix, "attn.qkv"));
    proj_.collect(out, join_name(prefix, "attn.proj"));
    for (std::size_t h = 0; h < rel_.size(); ++h) {
      for (std::size_t a = 0; a < rel_[h].axes.size(); ++a) {
        out.push_back({join_name(prefix, "attn.rel_pos.h" + std::to_string(h) + ".axis" +
                                             std::to_string(a)),
                       rel_[h].axes[a]});
      }
    }
    if (skip_proj_) skip_proj_->collect(out, join_name(prefix, "skip_proj"));
    norm2_.collect(out, join_name(prefix, "norm2"));
    mlp_.collect(out, join_name(prefix, "mlp"));
  }

 private:
  BlockSpec spec_;
  BlockGeometry geo_;
  AttentionStyle style_;
  LayerNorm<T> norm1_, norm2_;
  Linear<T> qkv_, proj_;
  std::optional<Linear<T>> skip_proj_;
  Mlp<T> mlp_;
  std::vector<RelPosTable<T>> rel_;
};

/// Pre-norm transformer block over an unstructured token sequence, as used by
/// the fusion layers: x' = MSA(LN(x)) + x; out = MLP(LN(x')) + x'.
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t width, std::size_t heads, std::size_t mlp_ratio, Rng& rng,
                   double ln_eps = 1e-6)
      : heads_(heads) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("transformer block: width " + std::to_string(width) +
                        " not divisible into " + std::to_string(heads) + " heads");
    }
    norm1_ = LayerNorm<T>::create(width, static_cast<T>(ln_eps));
    qkv_ = Linear<T>::create(width, 3 * width, rng);
    proj_ = Linear<T>::create(width, width, rng);
    norm2_ = LayerNorm<T>::create(width, static_cast<T>(ln_eps));
    mlp_ = Mlp<T>::create(width, mlp_ratio * width, width, rng);
  }

  std::size_t width() const { return proj_.out_features(); }
  Linear<T>& qkv() { return qkv_; }
  Linear<T>& proj() { return proj_; }
  Mlp<T>& mlp() { return mlp_; }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::size_t d = width();
    if (x.rank() != 2 || x.dim(1) != d) {
      throw ConfigError("transformer block of width " + std::to_string(d) + " got tokens " +
                        shape_string(x.shape()));
    }
    const std::size_t dh = d / heads_;
    auto qkv = qkv_(norm1_(x));
    std::vector<Tensor<T>> heads;
    for (std::size_t h = 0; h < heads_; ++h) {
      const std::size_t b = h * dh;
      auto q = slice_cols(qkv, b, b + dh);
      auto k = slice_cols(qkv, d + b, d + b + dh);
      auto v = slice_cols(qkv, 2 * d + b, 2 * d + b + dh);
      heads.push_back(pooled_attention<T>(q, k, v, {}, {}, false, nullptr, false));
    }
    auto mid = add(proj_(heads_ == 1 ? heads.front() : concat_cols(heads)), x);
    return add(mlp_(norm2_(mid)), mid);
  }

  void collect(ParamList<T>& out, std::string_view prefix) const {
    norm1_.collect(out, join_name(prefix, "norm1"));
    qkv_.collect(out, join_name(prefix, "attn.qkv"));
    proj_.collect(out, join_name(prefix, "attn.proj"));
    norm2_.collect(out, join_name(prefix, "norm2"));
    mlp_.collect(out, join_name(prefix, "mlp"));
  }

 private:
  std::size_t heads_ = 1;
  LayerNorm<T> norm1_, norm2_;
  Linear<T> qkv_, proj_;
  Mlp<T> mlp_;
};

}  // namespace mmbt
