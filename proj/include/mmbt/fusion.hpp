// Bottleneck fusion: L shared tokens carry everything that passes between the
// video and audio streams. Each block runs a plain transformer layer over
// [video tokens, bottleneck] and then another over [bottleneck, audio tokens].
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmbt/attention.hpp"

namespace mmbt {

enum class BottleneckMode {
  sequential,  // block k consumes block k-1's bottleneck output
  averaging,   // block k consumes the mean of all earlier blocks' outputs
};

inline std::string to_string(BottleneckMode m) {
  return m == BottleneckMode::sequential ? "sequential" : "averaging";
}

inline BottleneckMode bottleneck_mode_from(const std::string& s) {
  if (s == "sequential") return BottleneckMode::sequential;
  if (s == "averaging") return BottleneckMode::averaging;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

struct FusionConfig {
  std::size_t blocks = 4;  // K
  std::size_t tokens = 4;  // L
  std::size_t heads = 1;
  std::size_t mlp_ratio = 4;
  BottleneckMode mode = BottleneckMode::sequential;
  double ln_eps = 1e-6;
};

template <typename T>
struct FusionState {
  TokenSet<T> video;
  TokenSet<T> audio;
  Tensor<T> bottleneck;  // [L x d]
  std::size_t block_index = 0;
};

struct FusionOptions {
  /// Every pass sees a constant copy of the initial bottleneck and its
  /// updates are discarded, which cuts the only cross-modal path.
  bool freeze_bottleneck = false;
};

/// Score-matrix element counts for one fusion layer.
struct AttentionCost {
  std::uint64_t bottleneck = 0;  // (N+1+L)^2 + (M+1+L)^2
  std::uint64_t merged = 0;      // (N+M+2)^2
  bool precondition = false;     // L <= min(N, M) / 8
};

inline AttentionCost attention_cost(std::uint64_t n, std::uint64_t m, std::uint64_t l) {
  AttentionCost c;
  c.bottleneck = (n + 1 + l) * (n + 1 + l) + (m + 1 + l) * (m + 1 + l);
  c.merged = (n + m + 2) * (n + m + 2);
  c.precondition = 8 * l <= std::min(n, m);
  return c;
}

template <typename T>
class AVBottleneck {
 public:
  AVBottleneck() = default;

  AVBottleneck(std::size_t width, const FusionConfig& cfg, Rng& rng) : cfg_(cfg), width_(width) {
    if (cfg.blocks == 0) throw ConfigError("fusion needs at least one block");
    if (cfg.tokens == 0) throw ConfigError("fusion needs at least one bottleneck token");
    bottleneck_ = trunc_normal_param<T>({cfg.tokens, width}, rng);
    for (std::size_t k = 0; k < cfg.blocks; ++k) {
      video_pass_.emplace_back(width, cfg.heads, cfg.mlp_ratio, rng, cfg.ln_eps);
      audio_pass_.emplace_back(width, cfg.heads, cfg.mlp_ratio, rng, cfg.ln_eps);
    }
  }

  const FusionConfig& config() const { return cfg_; }
  std::size_t width() const { return width_; }
  TransformerBlock<T>& video_pass(std::size_t k) { return video_pass_.at(k); }
  TransformerBlock<T>& audio_pass(std::size_t k) { return audio_pass_.at(k); }
  const Tensor<T>& bottleneck_tokens() const { return bottleneck_; }

  FusionState<T> initial(const TokenSet<T>& video, const TokenSet<T>& audio) const {
    video.check();
    audio.check();
    if (video.width() != width_ || audio.width() != width_) {
      throw ConfigError("fusion width " + std::to_string(width_) + " but video tokens are " +
                        std::to_string(video.width()) + " wide and audio tokens " +
                        std::to_string(audio.width()));
    }
    const std::size_t n = video.grid_size(), m = audio.grid_size();
    if (!attention_cost(n, m, cfg_.tokens).precondition) {
      throw ConfigError("fusion: " + std::to_string(cfg_.tokens) +
                        " bottleneck tokens is not small against " + std::to_string(n) +
                        " video and " + std::to_string(m) + " audio tokens (need L <= min/8)");
    }
    return {video, audio, bottleneck_, 0};
  }

  /// One block: video pass then audio pass. Token counts are conserved. With
  /// `frozen`, the audio pass sees that constant instead of the video pass's
  /// bottleneck output.
  FusionState<T> block(const FusionState<T>& s, const Tensor<T>& bottleneck_in,
                       const Tensor<T>* frozen = nullptr) const {
    const std::size_t k = s.block_index;
    const std::size_t nv = s.video.rows(), na = s.audio.rows(), l = cfg_.tokens;
    auto v_out = video_pass_.at(k)(concat_rows<T>({s.video.tokens, bottleneck_in}));
    FusionState<T> next = s;
    next.video.tokens = slice_rows(v_out, 0, nv);
    auto b_mid = frozen ? *frozen : slice_rows(v_out, nv, nv + l);
    auto a_out = audio_pass_.at(k)(concat_rows<T>({b_mid, s.audio.tokens}));
    next.bottleneck = slice_rows(a_out, 0, l);
    next.audio.tokens = slice_rows(a_out, l, l + na);
    next.block_index = k + 1;
    return next;
  }

  FusionState<T> operator()(const TokenSet<T>& video, const TokenSet<T>& audio,
                            const FusionOptions& opts = {}) const {
    auto state = initial(video, audio);
    const auto frozen = bottleneck_.detach();
    std::vector<Tensor<T>> outputs;
    for (std::size_t k = 0; k < cfg_.blocks; ++k) {
      Tensor<T> fed = state.bottleneck;
      if (opts.freeze_bottleneck) {
        fed = frozen;
      } else if (cfg_.mode == BottleneckMode::averaging && !outputs.empty()) {
        fed = outputs.front();
        for (std::size_t i = 1; i < outputs.size(); ++i) fed = add(fed, outputs[i]);
        fed = scale(fed, T(1) / static_cast<T>(outputs.size()));
      }
      state = block(state, fed, opts.freeze_bottleneck ? &frozen : nullptr);
      outputs.push_back(state.bottleneck);
    }
    return state;
  }

  void collect(ParamList<T>& out, std::string_view prefix) const {
    out.push_back({join_name(prefix, "bottleneck"), bottleneck_});
    for (std::size_t k = 0; k < cfg_.blocks; ++k) {
      video_pass_[k].collect(out, join_name(prefix, "blocks." + std::to_string(k) + ".video"));
      audio_pass_[k].collect(out, join_name(prefix, "blocks." + std::to_string(k) + ".audio"));
    }
  }

 private:
  FusionConfig cfg_;
  std::size_t width_ = 0;
  Tensor<T> bottleneck_;
  std::vector<TransformerBlock<T>> video_pass_, audio_pass_;
};

/// Linear classifier over [video_cls, audio_cls]; rows are samples.
template <typename T>
Tensor<T> fuse_and_classify(const Tensor<T>& video_cls, const Tensor<T>& audio_cls,
                            const Linear<T>& head) {
  if (video_cls.rank() != 2 || audio_cls.rank() != 2 || video_cls.dim(0) != audio_cls.dim(0)) {
    throw DimensionError("fuse_and_classify: class embeddings " +
                         shape_string(video_cls.shape()) + " and " +
                         shape_string(audio_cls.shape()));
  }
  return head(concat_cols<T>({video_cls, audio_cls}));
}

}  // namespace mmbt
