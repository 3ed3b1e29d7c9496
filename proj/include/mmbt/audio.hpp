// Audio frontend: 16-bit PCM WAV input, linear resampling, log-mel
// spectrograms, spectrogram cache files and masking augmentation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <fftw3.h>

#include "mmbt/binary.hpp"
#include "mmbt/encoder.hpp"

namespace mmbt {

struct Waveform {
  std::vector<double> samples;
  double sample_rate = 16000.0;
};

/// h x T log-mel energies, row-major (bin-major).
struct Spectrogram {
  std::size_t bins = 0;
  std::size_t frames = 0;
  std::vector<float> values;

  float at(std::size_t bin, std::size_t frame) const { return values[bin * frames + frame]; }
  float& at(std::size_t bin, std::size_t frame) { return values[bin * frames + frame]; }

  template <typename T>
  Tensor<T> to_tensor() const {
    return Tensor<T>(Shape{1, bins, frames}, std::vector<T>(values.begin(), values.end()));
  }
};

struct MelConfig {
  std::size_t n_mels = 128;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t target_frames = 1024;
  std::size_t n_fft = 0;  // 0: next power of two >= window length
  double fmin = 20.0;
  double fmax = 0.0;      // 0: Nyquist
  double log_floor = 1e-10;
  bool normalize = true;
};

// ---------------------------------------------------------------------------
// WAV


/// Parses a RIFF/WAVE byte buffer holding 16-bit signed PCM; channels are averaged.
inline Waveform parse_wav(const std::string& bytes) {
  const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(b, "RIFF", 4) != 0 || std::memcmp(b + 8, "WAVE", 4) != 0) {
    throw InputError("not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  for (std::size_t pos = 12; pos + 8 <= bytes.size();) {
    const std::uint32_t len = detail::read_u32(b + pos + 4);
    const unsigned char* body = b + pos + 8;
    if (pos + 8 + len > bytes.size()) throw InputError("truncated WAV chunk");
    if (std::memcmp(b + pos, "fmt ", 4) == 0) {
      if (len < 16) throw InputError("short fmt chunk");
      format = detail::read_u16(body);
      channels = detail::read_u16(body + 2);
      rate = detail::read_u32(body + 4);
      bits = detail::read_u16(body + 14);
    } else if (std::memcmp(b + pos, "data", 4) == 0) {
      data = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (format != 1 || bits != 16) throw InputError("only 16-bit PCM WAV is supported");
  if (channels == 0 || rate == 0 || !data) throw InputError("WAV without channels, rate or data");
  Waveform w;
  w.sample_rate = rate;
  const std::size_t frames = data_len / (2 * channels);
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      acc += static_cast<std::int16_t>(detail::read_u16(data + 2 * (i * channels + c)));
    }
    w.samples[i] = acc / channels / 32768.0;
  }
  return w;
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open WAV file '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes);
}

/// Mono 16-bit PCM encoding; samples are clipped to [-1, 1].
inline std::string encode_wav(const Waveform& w) {
  std::string out = "RIFF";
  const std::uint32_t data_len = static_cast<std::uint32_t>(2 * w.samples.size());
  detail::put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  const auto rate = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  detail::put_u32(out, rate);
  detail::put_u32(out, rate * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_len);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(
                             std::lround(c * 32767.0))));
  }
  return out;
}

inline void write_wav(const std::string& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write WAV file '" + path + "'");
  const auto bytes = encode_wav(w);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Linear-interpolation resampling.
inline Waveform resample(const Waveform& w, double target_rate) {
  if (target_rate <= 0 || w.sample_rate <= 0) throw InputError("resample: rates must be positive");
  if (target_rate == w.sample_rate || w.samples.empty()) return {w.samples, target_rate};
  const double step = w.sample_rate / target_rate;
  const auto n = static_cast<std::size_t>(std::floor((w.samples.size() - 1) / step)) + 1;
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = i * step;
    const auto j = static_cast<std::size_t>(t);
    const double frac = t - j;
    const double next = j + 1 < w.samples.size() ? w.samples[j + 1] : w.samples[j];
    out.samples[i] = w.samples[j] + frac * (next - w.samples[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mel scale and filterbank

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Centre frequencies (Hz) of the n_mels triangles, equally spaced in mel.
inline std::vector<double> mel_centers(std::size_t n_mels, double fmin, double fmax) {
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  std::vector<double> c(n_mels);
  for (std::size_t m = 0; m < n_mels; ++m) c[m] = mel_to_hz(lo + (hi - lo) * (m + 1) / (n_mels + 1));
  return c;
}

/// [n_mels][n_fft/2 + 1] triangular weights on the HTK mel scale.
inline std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t n_fft,
                                                       double sample_rate, double fmin,
                                                       double fmax) {
  if (fmax <= fmin) throw ConfigError("mel filterbank: fmax must exceed fmin");
  const std::size_t bins = n_fft / 2 + 1;
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  std::vector<double> edge(n_mels + 2);
  for (std::size_t i = 0; i < edge.size(); ++i) edge[i] = lo + (hi - lo) * i / (n_mels + 1);
  std::vector<std::vector<double>> fb(n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t k = 0; k < bins; ++k) {
    const double mel = hz_to_mel(k * sample_rate / n_fft);
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double l = edge[m], c = edge[m + 1], r = edge[m + 2];
      if (mel > l && mel < r) fb[m][k] = mel <= c ? (mel - l) / (c - l) : (r - mel) / (r - c);
    }
  }
  return fb;
}

// ---------------------------------------------------------------------------
// Spectrograms

struct FrameLayout {
  std::size_t window = 0, hop = 0, n_fft = 0, frames = 0;
};

inline FrameLayout frame_layout(const Waveform& w, const MelConfig& cfg) {
  if (w.samples.empty()) throw InputError("log_mel: empty waveform");
  if (w.sample_rate <= 0) throw InputError("log_mel: sample rate must be positive");
  FrameLayout f;
  f.window = static_cast<std::size_t>(std::lround(cfg.win_ms * 1e-3 * w.sample_rate));
  f.hop = static_cast<std::size_t>(std::lround(cfg.hop_ms * 1e-3 * w.sample_rate));
  if (f.window == 0 || f.hop == 0) throw ConfigError("log_mel: window and hop must be positive");
  f.n_fft = cfg.n_fft;
  if (f.n_fft == 0) {
    f.n_fft = 1;
    while (f.n_fft < f.window) f.n_fft *= 2;
  }
  if (f.n_fft < f.window) throw ConfigError("log_mel: n_fft shorter than the window");
  if (w.samples.size() < f.window) {
    throw InputError("log_mel: waveform of " + std::to_string(w.samples.size()) +
                     " samples is shorter than one " + std::to_string(f.window) +
                     "-sample window");
  }
  f.frames = 1 + (w.samples.size() - f.window) / f.hop;
  return f;
}

/// |STFT| with a periodic Hann window: [frames][n_fft/2 + 1].
inline std::vector<std::vector<double>> stft_magnitude(const Waveform& w, const MelConfig& cfg) {
  const auto f = frame_layout(w, cfg);
  const std::size_t bins = f.n_fft / 2 + 1;
  std::vector<double> window(f.window);
  for (std::size_t i = 0; i < f.window; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / f.window);
  }
  double* in = fftw_alloc_real(f.n_fft);
  fftw_complex* out = fftw_alloc_complex(bins);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(f.n_fft), in, out, FFTW_ESTIMATE);
  std::vector<std::vector<double>> mag(f.frames, std::vector<double>(bins));
  for (std::size_t t = 0; t < f.frames; ++t) {
    std::fill(in, in + f.n_fft, 0.0);
    for (std::size_t i = 0; i < f.window; ++i) in[i] = w.samples[t * f.hop + i] * window[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) mag[t][k] = std::hypot(out[k][0], out[k][1]);
  }
  fftw_destroy_plan(plan);
  fftw_free(in);
  fftw_free(out);
  return mag;
}

/// Log mel energies over the frames the waveform actually covers; no padding
/// or normalisation.
inline Spectrogram log_mel_raw(const Waveform& w, const MelConfig& cfg = {}) {
  const auto f = frame_layout(w, cfg);
  const double fmax = cfg.fmax > 0 ? cfg.fmax : w.sample_rate / 2;
  const auto fb = mel_filterbank(cfg.n_mels, f.n_fft, w.sample_rate, cfg.fmin, fmax);
  const auto mag = stft_magnitude(w, cfg);
  Spectrogram s{cfg.n_mels, f.frames, std::vector<float>(cfg.n_mels * f.frames)};
  for (std::size_t t = 0; t < f.frames; ++t) {
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < mag[t].size(); ++k) e += fb[m][k] * mag[t][k];
      s.at(m, t) = static_cast<float>(std::log(std::max(e, cfg.log_floor)));
    }
  }
  return s;
}

/// Zero-pad or truncate to `frames` columns.
inline Spectrogram fit_frames(const Spectrogram& s, std::size_t frames) {
  Spectrogram out{s.bins, frames, std::vector<float>(s.bins * frames, 0.0f)};
  const std::size_t keep = std::min(frames, s.frames);
  for (std::size_t m = 0; m < s.bins; ++m) {
    for (std::size_t t = 0; t < keep; ++t) out.at(m, t) = s.at(m, t);
  }
  return out;
}

/// Mean 0 / standard deviation 1 over the whole spectrogram; constant input
/// maps to zeros.
inline void standardize(Spectrogram& s) {
  double mean = 0;
  for (float v : s.values) mean += v;
  mean /= static_cast<double>(s.values.size());
  double var = 0;
  for (float v : s.values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(s.values.size()));
  for (float& v : s.values) v = sd > 0 ? static_cast<float>((v - mean) / sd) : 0.0f;
}

/// Full pipeline: STFT magnitude, mel filterbank, log, pad/truncate, standardise.
inline Spectrogram log_mel(const Waveform& w, const MelConfig& cfg = {}) {
  auto s = fit_frames(log_mel_raw(w, cfg), cfg.target_frames);
  if (cfg.normalize) standardize(s);
  return s;
}

// ---------------------------------------------------------------------------
// Cache files: "MMBTSPEC", u32 version, u32 bins, u32 frames, f32 values (little endian)

inline constexpr std::uint32_t kSpectrogramFormatVersion = 1;

inline std::string encode_spectrogram(const Spectrogram& s) {
  std::string out = "MMBTSPEC";
  detail::put_u32(out, kSpectrogramFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(s.bins));
  detail::put_u32(out, static_cast<std::uint32_t>(s.frames));
  for (float v : s.values) detail::put_f32(out, v);
  return out;
}

inline Spectrogram decode_spectrogram(const std::string& bytes) {
  const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 20 || std::memcmp(b, "MMBTSPEC", 8) != 0) {
    throw InputError("not a spectrogram file (bad magic)");
  }
  const auto version = detail::read_u32(b + 8);
  if (version != kSpectrogramFormatVersion) {
    throw InputError("unsupported spectrogram format version " + std::to_string(version));
  }
  Spectrogram s{detail::read_u32(b + 12), detail::read_u32(b + 16), {}};
  if (bytes.size() != 20 + 4 * s.bins * s.frames) throw InputError("spectrogram file size mismatch");
  s.values.resize(s.bins * s.frames);
  for (std::size_t i = 0; i < s.values.size(); ++i) {
    s.values[i] = std::bit_cast<float>(detail::read_u32(b + 20 + 4 * i));
  }
  return s;
}

inline void save_spectrogram(const std::string& path, const Spectrogram& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write spectrogram file '" + path + "'");
  const auto bytes = encode_spectrogram(s);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Spectrogram load_spectrogram(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open spectrogram file '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_spectrogram(bytes);
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  std::size_t time_mask = 96;  // widest time mask, frames
  std::size_t freq_mask = 24;  // widest frequency mask, bins
};

/// One time mask and one frequency mask, widths drawn uniformly from
/// [0, max]; masked cells are set to 0.
inline Spectrogram mask_spectrogram(const Spectrogram& s, const AugmentConfig& cfg, Rng& rng) {
  Spectrogram out = s;
  const std::size_t tw = std::min(rng.index(cfg.time_mask + 1), s.frames);
  const std::size_t t0 = rng.index(s.frames - tw + 1);
  const std::size_t fw = std::min(rng.index(cfg.freq_mask + 1), s.bins);
  const std::size_t f0 = rng.index(s.bins - fw + 1);
  for (std::size_t m = 0; m < s.bins; ++m) {
    for (std::size_t t = 0; t < s.frames; ++t) {
      if ((t >= t0 && t < t0 + tw) || (m >= f0 && m < f0 + fw)) out.at(m, t) = 0.0f;
    }
  }
  return out;
}

inline std::pair<Spectrogram, Spectrogram> augment_views(const Spectrogram& s,
                                                         std::uint64_t seed,
                                                         const AugmentConfig& cfg = {}) {
  Rng rng(seed);
  auto first = mask_spectrogram(s, cfg, rng);
  auto second = mask_spectrogram(s, cfg, rng);
  return {std::move(first), std::move(second)};
}

/// Spectrogram to class token + patch tokens through the encoder's patch embedding.
template <typename T>
TokenSet<T> patch_embed_audio(const Spectrogram& s, const Encoder<T>& encoder) {
  const auto& sched = encoder.schedule();
  if (sched.axes() != 2 || sched.input_extent != Extents{s.bins, s.frames}) {
    throw ConfigError("spectrogram " + std::to_string(s.bins) + "x" + std::to_string(s.frames) +
                      " does not match schedule input " + shape_string(sched.input_extent));
  }
  return encoder.embed(s.to_tensor<T>());
}

}  // namespace mmbt
