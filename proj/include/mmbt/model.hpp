// The full audio-visual classifier: two encoders, bottleneck fusion, a linear
// head over the concatenated class tokens, and the two projection heads used
// by the contrastive losses.
#pragma once

#include <string>
#include <vector>

#include "mmbt/encoder.hpp"
#include "mmbt/fusion.hpp"
#include "mmbt/objectives.hpp"

namespace mmbt {

/// Where the contrastive losses read their class embeddings.
enum class ContrastiveSource { pre_fusion, post_fusion };

inline std::string to_string(ContrastiveSource s) {
  return s == ContrastiveSource::pre_fusion ? "pre_fusion" : "post_fusion";
}

inline ContrastiveSource contrastive_source_from(const std::string& s) {
  if (s == "pre_fusion") return ContrastiveSource::pre_fusion;
  if (s == "post_fusion") return ContrastiveSource::post_fusion;
  throw ConfigError("unknown contrastive source '" + s + "'");
}

struct ModelSpec {
  StageSchedule audio, video;
  std::size_t classes = 4;
  FusionConfig fusion;
  std::size_t projection_dim = 256;
  ContrastiveSource contrastive_source = ContrastiveSource::pre_fusion;
};

struct ForwardOptions {
  bool zero_audio = false;
  bool zero_video = false;
  FusionOptions fusion;
};

/// Rows are samples. Contrastive embeddings are the raw class tokens of the
/// configured source (projection happens inside the losses).
template <typename T>
struct ModelOutput {
  Tensor<T> logits;                      // [B x C]
  Tensor<T> audio_embed, video_embed;    // [B x d], contrastive source
  Tensor<T> fused;                       // [B x 2d], post-fusion video|audio class tokens
};

template <typename T>
class MultimodalModel {
 public:
  MultimodalModel() = default;

  MultimodalModel(ModelSpec spec, Rng& rng) : spec_(std::move(spec)) {
    if (spec_.audio.modality != "audio" || spec_.audio.axes() != 2) {
      throw ConfigError("audio schedule '" + spec_.audio.name + "' must be a 2-axis audio schedule");
    }
    if (spec_.video.modality != "video" || spec_.video.axes() != 3 || spec_.video.in_channels != 3) {
      throw ConfigError("video schedule '" + spec_.video.name +
                        "' must be a 3-axis RGB video schedule");
    }
    if (spec_.audio.final_channels() != spec_.video.final_channels()) {
      throw ConfigError("audio and video encoders end at different widths (" +
                        std::to_string(spec_.audio.final_channels()) + " vs " +
                        std::to_string(spec_.video.final_channels()) + ")");
    }
    if (spec_.classes < 2) throw ConfigError("at least 2 classes required");
    const std::size_t d = spec_.audio.final_channels();
    // Fail before allocating anything if the bottleneck is too large.
    const auto c = attention_cost(numel(spec_.video.final_grid()), numel(spec_.audio.final_grid()),
                                  spec_.fusion.tokens);
    if (!c.precondition) {
      throw ConfigError("fusion: " + std::to_string(spec_.fusion.tokens) +
                        " bottleneck tokens exceed min(N, M)/8 for the final encoder grids");
    }
    audio_ = build_mat<T>(spec_.audio, rng);
    video_ = build_video_encoder<T>(spec_.video, rng);
    fusion_ = AVBottleneck<T>(d, spec_.fusion, rng);
    head_ = Linear<T>::create(2 * d, spec_.classes, rng);
    g_a_ = ProjectionHead<T>::create(d, spec_.projection_dim, rng);
    g_v_ = ProjectionHead<T>::create(d, spec_.projection_dim, rng);
  }

  const ModelSpec& spec() const { return spec_; }
  std::size_t width() const { return spec_.audio.final_channels(); }
  const Encoder<T>& audio_encoder() const { return audio_; }
  const Encoder<T>& video_encoder() const { return video_; }
  AVBottleneck<T>& fusion() { return fusion_; }
  const Linear<T>& head() const { return head_; }
  const ProjectionHead<T>& audio_projection() const { return g_a_; }
  const ProjectionHead<T>& video_projection() const { return g_v_; }

  /// [bins x frames] and (frames, height, width) the encoders accept.
  const Extents& audio_extent() const { return spec_.audio.input_extent; }
  const Extents& video_extent() const { return spec_.video.input_extent; }

  /// One sample: audio [1 x bins x frames], video [3 x frames x height x width].
  ModelOutput<T> operator()(const Tensor<T>& audio, const Tensor<T>& video,
                            const ForwardOptions& opts = {}) const {
    auto a_in = opts.zero_audio ? Tensor<T>::zeros(audio.shape()) : audio;
    auto v_in = opts.zero_video ? Tensor<T>::zeros(video.shape()) : video;
    auto a = audio_(a_in);
    auto v = video_(v_in);
    auto fused = fusion_(v, a, opts.fusion);
    const auto fv = fused.video.class_token(), fa = fused.audio.class_token();
    ModelOutput<T> out;
    out.logits = fuse_and_classify(fv, fa, head_);
    out.fused = concat_cols<T>({fv, fa});
    if (spec_.contrastive_source == ContrastiveSource::pre_fusion) {
      out.audio_embed = a.class_token();
      out.video_embed = v.class_token();
    } else {
      out.audio_embed = fa;
      out.video_embed = fv;
    }
    return out;
  }

  /// Contrastive embeddings only; skips fusion when the source allows it.
  std::pair<Tensor<T>, Tensor<T>> embed(const Tensor<T>& audio, const Tensor<T>& video) const {
    if (spec_.contrastive_source == ContrastiveSource::post_fusion) {
      auto out = (*this)(audio, video);
      return {out.audio_embed, out.video_embed};
    }
    return {audio_(audio).class_token(), video_(video).class_token()};
  }

  void collect(ParamList<T>& out) const {
    audio_.collect(out, "audio");
    video_.collect(out, "video");
    fusion_.collect(out, "fusion");
    head_.collect(out, "head");
    g_a_.collect(out, "proj_audio");
    g_v_.collect(out, "proj_video");
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out);
    return out;
  }

 private:
  ModelSpec spec_;
  Encoder<T> audio_, video_;
  AVBottleneck<T> fusion_;
  Linear<T> head_;
  ProjectionHead<T> g_a_, g_v_;
};

/// Row-stacks per-sample outputs.
template <typename T>
ModelOutput<T> stack(const std::vector<ModelOutput<T>>& rows) {
  std::vector<Tensor<T>> l, a, v, f;
  for (const auto& r : rows) {
    l.push_back(r.logits), a.push_back(r.audio_embed), v.push_back(r.video_embed),
        f.push_back(r.fused);
  }
  return {concat_rows(l), concat_rows(a), concat_rows(v), concat_rows(f)};
}

}  // namespace mmbt
