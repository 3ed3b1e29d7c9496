// Checkpoint files: "MMBTCKPT", u32 version, u32 scalar width, then the run
// config, both schedules (canonical JSON) with their hashes, step, RNG state,
// every parameter tensor and the AdamW moments, all little endian.
#pragma once

#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mmbt/binary.hpp"
#include "mmbt/trainer.hpp"

namespace mmbt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t scalar_bytes = 4;
  std::string config;  // RunConfig JSON
  std::string audio_schedule, video_schedule;
  std::uint64_t audio_hash = 0, video_hash = 0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<CheckpointTensor> params;
  std::uint64_t optimizer_steps = 0;
  std::vector<std::vector<double>> first_moments, second_moments;

  RunConfig run_config() const { return RunConfig::from_json(nlohmann::json::parse(config)); }

  /// Model spec rebuilt from the embedded schedules; no files needed.
  ModelSpec model_spec() const {
    auto cfg = run_config();
    ModelSpec s;
    s.audio = StageSchedule::parse(audio_schedule);
    s.video = StageSchedule::parse(video_schedule);
    if (s.audio.hash() != audio_hash || s.video.hash() != video_hash) {
      throw InputError("checkpoint: embedded schedule does not match its recorded hash");
    }
    s.classes = cfg.data.classes;
    s.fusion = cfg.fusion;
    s.projection_dim = cfg.projection_dim;
    s.contrastive_source = cfg.contrastive_source;
    return s;
  }
};

namespace detail {

inline void put_values(std::string& out, const std::vector<double>& v, std::uint32_t bytes) {
  for (double x : v) {
    if (bytes == 4) {
      put_f32(out, static_cast<float>(x));
    } else {
      put_f64(out, x);
    }
  }
}

inline std::vector<double> take_values(ByteReader& in, std::size_t n, std::uint32_t bytes) {
  std::vector<double> v(n);
  for (auto& x : v) x = bytes == 4 ? static_cast<double>(in.f32()) : in.f64();
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out = "MMBTCKPT";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, c.scalar_bytes);
  detail::put_string(out, c.config);
  detail::put_string(out, c.audio_schedule);
  detail::put_string(out, c.video_schedule);
  detail::put_u64(out, c.audio_hash);
  detail::put_u64(out, c.video_hash);
  detail::put_u64(out, c.seed);
  detail::put_u64(out, c.step);
  detail::put_string(out, c.rng_state);
  detail::put_u64(out, c.params.size());
  for (const auto& p : c.params) {
    detail::put_string(out, p.name);
    detail::put_u32(out, static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) detail::put_u64(out, d);
    detail::put_values(out, p.values, c.scalar_bytes);
  }
  detail::put_u64(out, c.optimizer_steps);
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    detail::put_values(out, c.first_moments.at(i), c.scalar_bytes);
    detail::put_values(out, c.second_moments.at(i), c.scalar_bytes);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader in(bytes, "checkpoint");
  in.expect("MMBTCKPT");
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint c;
  c.scalar_bytes = in.u32();
  if (c.scalar_bytes != 4 && c.scalar_bytes != 8) {
    throw InputError("checkpoint: unsupported scalar width " + std::to_string(c.scalar_bytes));
  }
  c.config = in.string();
  c.audio_schedule = in.string();
  c.video_schedule = in.string();
  c.audio_hash = in.u64();
  c.video_hash = in.u64();
  c.seed = in.u64();
  c.step = in.u64();
  c.rng_state = in.string();
  const auto n = in.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    CheckpointTensor t;
    t.name = in.string();
    const auto rank = in.u32();
    for (std::uint32_t a = 0; a < rank; ++a) t.shape.push_back(static_cast<std::size_t>(in.u64()));
    t.values = detail::take_values(in, numel(t.shape), c.scalar_bytes);
    c.params.push_back(std::move(t));
  }
  c.optimizer_steps = in.u64();
  for (const auto& p : c.params) {
    c.first_moments.push_back(detail::take_values(in, p.values.size(), c.scalar_bytes));
    c.second_moments.push_back(detail::take_values(in, p.values.size(), c.scalar_bytes));
  }
  if (!in.done()) throw InputError("checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint '" + path + "'");
  const auto bytes = encode_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path + "'");
  return decode_checkpoint(std::string(std::istreambuf_iterator<char>(in), {}));
}

template <typename T>
Checkpoint capture(const Trainer<T>& tr) {
  Checkpoint c;
  c.scalar_bytes = sizeof(T);
  c.config = tr.config().to_json().dump();
  const auto& spec = tr.model().spec();
  c.audio_schedule = spec.audio.canonical();
  c.video_schedule = spec.video.canonical();
  c.audio_hash = spec.audio.hash();
  c.video_hash = spec.video.hash();
  c.seed = tr.seed();
  c.step = tr.step_count();
  c.rng_state = tr.rng().state();
  const auto& opt = tr.optimizer();
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const auto& p = opt.params()[i];
    c.params.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
    c.first_moments.emplace_back(opt.first_moments()[i].begin(), opt.first_moments()[i].end());
    c.second_moments.emplace_back(opt.second_moments()[i].begin(), opt.second_moments()[i].end());
  }
  c.optimizer_steps = opt.steps();
  return c;
}

/// Copies checkpoint state into a trainer built for the same schedules.
template <typename T>
void restore(Trainer<T>& tr, const Checkpoint& c) {
  const auto& spec = tr.model().spec();
  if (c.audio_hash != spec.audio.hash() || c.video_hash != spec.video.hash()) {
    throw ConfigError("checkpoint schedule hash mismatch: checkpoint has audio " +
                      std::to_string(c.audio_hash) + " / video " + std::to_string(c.video_hash) +
                      ", model has " + std::to_string(spec.audio.hash()) + " / " +
                      std::to_string(spec.video.hash()));
  }
  if (c.scalar_bytes != sizeof(T)) throw ConfigError("checkpoint scalar width differs from model");
  auto& opt = tr.optimizer();
  const auto& params = opt.params();
  if (params.size() != c.params.size()) {
    throw ConfigError("checkpoint has " + std::to_string(c.params.size()) +
                      " parameter tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = c.params[i];
    auto dst = params[i].tensor;
    if (src.name != params[i].name || src.shape != dst.shape()) {
      throw ConfigError("checkpoint tensor '" + src.name + "' " + shape_string(src.shape) +
                        " does not match model tensor '" + params[i].name + "' " +
                        shape_string(dst.shape()));
    }
    auto v = dst.mutable_values();
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = static_cast<T>(src.values[k]);
      opt.first_moments()[i][k] = static_cast<T>(c.first_moments[i][k]);
      opt.second_moments()[i][k] = static_cast<T>(c.second_moments[i][k]);
    }
  }
  opt.set_steps(static_cast<std::size_t>(c.optimizer_steps));
  tr.rng().set_state(c.rng_state);
  tr.set_step_count(static_cast<std::size_t>(c.step));
}

/// Trainer rebuilt entirely from a checkpoint.
template <typename T>
Trainer<T> trainer_from_checkpoint(const Checkpoint& c) {
  Trainer<T> tr(c.run_config(), c.model_spec(), c.seed);
  restore(tr, c);
  return tr;
}

}  // namespace mmbt
