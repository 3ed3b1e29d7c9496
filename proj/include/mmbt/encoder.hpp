// Schedule-driven encoders: MAT over spectrograms, the 3-axis variant over
// clips, and the plain-attention AST baseline all come from one class.
#pragma once

#include <string>
#include <vector>

#include "mmbt/attention.hpp"

namespace mmbt {

/// (channels, grid) after one stage of an encoder forward pass.
struct LedgerEntry {
  std::string stage;
  std::size_t channels = 0;
  Extents grid;
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;

  Encoder(StageSchedule schedule, Rng& rng) : schedule_(std::move(schedule)) {
    schedule_.validate();
    const auto& pe = schedule_.patch;
    Shape kshape{pe.channels, schedule_.in_channels};
    kshape.insert(kshape.end(), pe.kernel.begin(), pe.kernel.end());
    patch_weight_ = trunc_normal_param<T>(kshape, rng);
    patch_bias_ = zeros_param<T>({pe.channels});
    cls_ = trunc_normal_param<T>({1, pe.channels}, rng);
    if (schedule_.abs_pos_embed) {
      pos_ = trunc_normal_param<T>({numel(pe.grid) + 1, pe.channels}, rng);
    }
    const AttentionStyle style{schedule_.rel_pos, schedule_.residual_pooling, schedule_.ln_eps};
    for (std::size_t i = 0; i < schedule_.blocks.size(); ++i) {
      blocks_.emplace_back(schedule_.blocks[i], schedule_.geometry(i), style, rng);
    }
    final_norm_ = LayerNorm<T>::create(schedule_.final_channels(),
                                       static_cast<T>(schedule_.ln_eps));
  }

  const StageSchedule& schedule() const { return schedule_; }
  std::vector<MultiScaleBlock<T>>& blocks() { return blocks_; }
  std::size_t width() const { return schedule_.final_channels(); }

  /// Input tensor shape expected by forward(): [C x extent...].
  Shape input_shape() const {
    Shape s{schedule_.in_channels};
    s.insert(s.end(), schedule_.input_extent.begin(), schedule_.input_extent.end());
    return s;
  }

  /// Class token prepended to the convolved patch grid.
  TokenSet<T> embed(const Tensor<T>& input) const {
    if (input.shape() != input_shape()) {
      throw ConfigError("encoder '" + schedule_.name + "' expects input " +
                        shape_string(input_shape()) + ", got " + shape_string(input.shape()));
    }
    const auto& pe = schedule_.patch;
    auto patches = conv_tokens(input, patch_weight_, patch_bias_, pe.stride, pe.padding);
    if (patches.dim(0) != numel(pe.grid)) {
      throw ConfigError("patch embedding produced " + std::to_string(patches.dim(0)) +
                        " tokens, schedule declares grid " + shape_string(pe.grid));
    }
    auto tokens = concat_rows<T>({cls_, patches});
    if (pos_.defined()) tokens = add(tokens, pos_);
    return {tokens, pe.grid, true};
  }

  /// Full forward; when `ledger` is given, records (channels, grid) after the
  /// patch embedding and after every block.
  TokenSet<T> operator()(const Tensor<T>& input, std::vector<LedgerEntry>* ledger = nullptr) const {
    auto x = embed(input);
    if (ledger) ledger->push_back({"patch_embed", x.width(), x.extents});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = blocks_[i](x);
      if (ledger) ledger->push_back({"block " + std::to_string(i), x.width(), x.extents});
    }
    return {final_norm_(x.tokens), x.extents, x.has_cls};
  }

  void collect(ParamList<T>& out, std::string_view prefix) const {
    out.push_back({join_name(prefix, "patch_embed.weight"), patch_weight_});
    out.push_back({join_name(prefix, "patch_embed.bias"), patch_bias_});
    out.push_back({join_name(prefix, "cls_token"), cls_});
    if (pos_.defined()) out.push_back({join_name(prefix, "pos_embed"), pos_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect(out, join_name(prefix, "blocks." + std::to_string(i)));
    }
    final_norm_.collect(out, join_name(prefix, "norm"));
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    collect(out, "");
    return out;
  }

 private:
  StageSchedule schedule_;
  Tensor<T> patch_weight_, patch_bias_, cls_, pos_;
  std::vector<MultiScaleBlock<T>> blocks_;
  LayerNorm<T> final_norm_;
};

/// MAT-style encoder over a [1 x mels x frames] spectrogram (2-axis grid).
template <typename T>
Encoder<T> build_mat(const StageSchedule& schedule, Rng& rng) {
  if (schedule.axes() != 2) {
    throw ConfigError("schedule '" + schedule.name + "' is not a 2-axis audio schedule");
  }
  return Encoder<T>(schedule, rng);
}

/// Video encoder over a [3 x frames x height x width] clip (3-axis grid).
template <typename T>
Encoder<T> build_video_encoder(const StageSchedule& schedule, Rng& rng) {
  if (schedule.axes() != 3) {
    throw ConfigError("schedule '" + schedule.name + "' is not a 3-axis video schedule");
  }
  return Encoder<T>(schedule, rng);
}

}  // namespace mmbt
