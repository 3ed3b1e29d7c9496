// Synthetic paired audio/video data. Each class has a tone pattern in the
// spectrogram (one mel band pulsing at a class period) and a moving blob in the
// clip (class colour and direction); seeded Gaussian noise is added on top.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmbt/audio.hpp"
#include "mmbt/random.hpp"

namespace mmbt {

struct SyntheticConfig {
  std::size_t classes = 4;
  std::size_t per_class = 8;
  std::size_t mel_bins = 32;
  std::size_t audio_frames = 160;  // stored length; training crops are shorter
  std::size_t video_frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.1;
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"classes", c.classes},           {"per_class", c.per_class},
       {"mel_bins", c.mel_bins},         {"audio_frames", c.audio_frames},
       {"video_frames", c.video_frames}, {"height", c.height},
       {"width", c.width},               {"noise", c.noise}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  c.classes = j.value("classes", c.classes);
  c.per_class = j.value("per_class", c.per_class);
  c.mel_bins = j.value("mel_bins", c.mel_bins);
  c.audio_frames = j.value("audio_frames", c.audio_frames);
  c.video_frames = j.value("video_frames", c.video_frames);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.noise = j.value("noise", c.noise);
}

/// Clip stored channel-first: [3 x frames x height x width].
struct Clip {
  std::size_t frames = 0, height = 0, width = 0;
  std::vector<float> values;

  float& at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) {
    return values[((c * frames + t) * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
    return values[((c * frames + t) * height + y) * width + x];
  }

  template <typename T>
  Tensor<T> to_tensor() const {
    return Tensor<T>({3, frames, height, width}, std::vector<T>(values.begin(), values.end()));
  }
};

enum class SignalKind { paired, audio_only };

struct SyntheticSample {
  std::size_t class_id = 0;
  Spectrogram spectrogram;
  Clip clip;
  std::uint64_t seed = 0;
  SignalKind kind = SignalKind::paired;
};

struct Dataset {
  SyntheticConfig config;
  std::vector<SyntheticSample> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> y;
    for (const auto& s : samples) y.push_back(s.class_id);
    return y;
  }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline void tone_pattern(Spectrogram& s, std::size_t c, std::size_t classes) {
  const std::size_t band = (2 * c + 1) * s.bins / (2 * classes);
  const std::size_t half_period = 4 + 2 * c;
  for (std::size_t t = 0; t < s.frames; ++t) {
    if ((t / half_period) % 2 != 0) continue;
    for (std::size_t m = band > 0 ? band - 1 : 0; m <= std::min(band + 1, s.bins - 1); ++m) {
      s.values[m * s.frames + t] += m == band ? 1.0f : 0.5f;
    }
  }
}

inline void blob_pattern(Clip& clip, std::size_t c, std::size_t classes) {
  const double angle = 2.0 * M_PI * static_cast<double>(c) / static_cast<double>(classes);
  const double cy = 0.5 * clip.height, cx = 0.5 * clip.width;
  const double speed = 0.25 * std::min(clip.height, clip.width) / std::max<std::size_t>(clip.frames, 1);
  const double radius = std::max(1.0, std::min(clip.height, clip.width) / 10.0);
  const std::size_t colour = c % 3;
  for (std::size_t t = 0; t < clip.frames; ++t) {
    const double step = static_cast<double>(t) - 0.5 * static_cast<double>(clip.frames);
    const double by = cy + speed * step * std::sin(angle), bx = cx + speed * step * std::cos(angle);
    for (std::size_t y = 0; y < clip.height; ++y)
      for (std::size_t x = 0; x < clip.width; ++x) {
        const double d2 = (y + 0.5 - by) * (y + 0.5 - by) + (x + 0.5 - bx) * (x + 0.5 - bx);
        const float g = static_cast<float>(std::exp(-d2 / (2 * radius * radius)));
        for (std::size_t ch = 0; ch < 3; ++ch) clip.at(ch, t, y, x) += ch == colour ? g : 0.3f * g;
      }
  }
}

}  // namespace detail

inline SyntheticSample make_sample(const SyntheticConfig& cfg, std::size_t class_id,
                                   std::uint64_t seed, SignalKind kind = SignalKind::paired) {
  if (class_id >= cfg.classes) throw InputError("synthetic sample: class out of range");
  SyntheticSample s;
  s.class_id = class_id;
  s.seed = seed;
  s.kind = kind;
  s.spectrogram = {cfg.mel_bins, cfg.audio_frames,
                   std::vector<float>(cfg.mel_bins * cfg.audio_frames, 0.0f)};
  s.clip = {cfg.video_frames, cfg.height, cfg.width,
            std::vector<float>(3 * cfg.video_frames * cfg.height * cfg.width, 0.0f)};
  detail::tone_pattern(s.spectrogram, class_id, cfg.classes);
  if (kind == SignalKind::paired) detail::blob_pattern(s.clip, class_id, cfg.classes);
  if (cfg.noise > 0) {
    Rng rng(seed);
    for (auto& v : s.spectrogram.values) v += static_cast<float>(rng.normal(0.0, cfg.noise));
    for (auto& v : s.clip.values) v += static_cast<float>(rng.normal(0.0, cfg.noise));
  }
  return s;
}

/// per_class samples of every class, interleaved by class.
inline Dataset generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (cfg.mel_bins < 3 || cfg.audio_frames == 0 || cfg.video_frames == 0 || cfg.height == 0 ||
      cfg.width == 0) {
    throw ConfigError("synthetic data extents must be positive (and at least 3 mel bins)");
  }
  Dataset d{cfg, {}};
  for (std::size_t i = 0; i < cfg.per_class; ++i)
    for (std::size_t c = 0; c < cfg.classes; ++c)
      d.samples.push_back(make_sample(cfg, c, detail::mix_seed(seed, d.samples.size())));
  return d;
}

/// Samples whose clip carries only noise; the class lives in the audio alone.
inline Dataset generate_audio_only(const SyntheticConfig& cfg, std::uint64_t seed) {
  Dataset d{cfg, {}};
  for (std::size_t c = 0; c < cfg.classes; ++c)
    d.samples.push_back(
        make_sample(cfg, c, detail::mix_seed(seed ^ 0xa5a5a5a5ull, c), SignalKind::audio_only));
  return d;
}

// Views --------------------------------------------------------------------

/// Start offsets of `views` evenly spaced windows of `length` within `total`;
/// a single view is centred.
inline std::vector<std::size_t> view_offsets(std::size_t total, std::size_t length,
                                             std::size_t views) {
  if (length > total) {
    throw InputError("crop of " + std::to_string(length) + " exceeds length " +
                     std::to_string(total));
  }
  if (views == 0) throw InputError("at least one view required");
  const std::size_t span = total - length;
  if (views == 1) return {span / 2};
  std::vector<std::size_t> out;
  for (std::size_t v = 0; v < views; ++v) {
    out.push_back(static_cast<std::size_t>(std::llround(static_cast<double>(v * span) / (views - 1))));
  }
  return out;
}

inline Spectrogram crop_audio(const Spectrogram& s, std::size_t frames, std::size_t offset) {
  if (offset + frames > s.frames) throw InputError("audio crop out of range");
  Spectrogram out{s.bins, frames, std::vector<float>(s.bins * frames)};
  for (std::size_t m = 0; m < s.bins; ++m)
    for (std::size_t t = 0; t < frames; ++t) out.values[m * frames + t] = s.at(m, offset + t);
  return out;
}

inline Clip crop_video(const Clip& c, std::size_t frames, std::size_t offset, bool flip = false) {
  if (offset + frames > c.frames) throw InputError("video crop out of range");
  Clip out{frames, c.height, c.width, std::vector<float>(3 * frames * c.height * c.width)};
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t y = 0; y < c.height; ++y)
        for (std::size_t x = 0; x < c.width; ++x)
          out.at(ch, t, y, x) = c.at(ch, offset + t, y, flip ? c.width - 1 - x : x);
  return out;
}

/// Corresponding audio and video windows for view v of n (time-aligned).
struct PairedView {
  Spectrogram audio;
  Clip video;
};

inline PairedView paired_view(const SyntheticSample& s, std::size_t audio_frames,
                              std::size_t video_frames, std::size_t view, std::size_t views) {
  return {crop_audio(s.spectrogram, audio_frames,
                     view_offsets(s.spectrogram.frames, audio_frames, views).at(view)),
          crop_video(s.clip, video_frames, view_offsets(s.clip.frames, video_frames, views).at(view))};
}

struct ViewAugment {
  AugmentConfig audio_masks{12, 4};
  bool flip = true;
};

/// Second view for the intra-modality losses: masked audio, randomly cropped
/// and possibly mirrored video.
inline PairedView augmented_view(const SyntheticSample& s, std::size_t audio_frames,
                                 std::size_t video_frames, const ViewAugment& aug, Rng& rng) {
  const std::size_t a_off = rng.index(s.spectrogram.frames - audio_frames + 1);
  const std::size_t v_off = rng.index(s.clip.frames - video_frames + 1);
  const bool flip = aug.flip && rng.uniform() < 0.5;
  auto audio = crop_audio(s.spectrogram, audio_frames, a_off);
  const std::uint64_t mask_seed = rng.engine()();
  audio = augment_views(audio, mask_seed, aug.audio_masks).first;
  return {std::move(audio), crop_video(s.clip, video_frames, v_off, flip)};
}

// Files ----------------------------------------------------------------------

inline std::string encode_clip(const Clip& c) {
  std::string out = "MMBTCLIP";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(c.frames));
  detail::put_u32(out, static_cast<std::uint32_t>(c.height));
  detail::put_u32(out, static_cast<std::uint32_t>(c.width));
  for (float v : c.values) detail::put_f32(out, v);
  return out;
}

/// Writes one .spec and one .clip per sample plus a JSON manifest of labels.
inline void write_dataset(const Dataset& d, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = d.config;
  auto& items = manifest["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    save_spectrogram(dir + "/" + stem + ".spec", s.spectrogram);
    std::ofstream(dir + "/" + stem + ".clip", std::ios::binary) << encode_clip(s.clip);
    items.push_back({{"id", stem}, {"class", s.class_id}, {"seed", s.seed}});
  }
  std::ofstream(dir + "/manifest.json") << manifest.dump(2) << "\n";
}

}  // namespace mmbt
