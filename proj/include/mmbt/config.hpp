// Run configuration: a JSON document (comments allowed). Schedule paths are
// resolved against the directory of the config file.
#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mmbt/model.hpp"
#include "mmbt/optim.hpp"
#include "mmbt/synthetic.hpp"

namespace mmbt {

struct TrainSettings {
  std::size_t steps = 300;
  std::size_t batch = 8;
  std::size_t log_every = 10;
  std::size_t eval_every = 10;  // full train-set accuracy; 0 disables
  std::size_t eval_views = 5;
  bool stop_at_full_accuracy = false;
  std::string checkpoint;  // written at the end when non-empty
};

struct RunConfig {
  std::string audio_schedule = "mat-tiny.schedule";
  std::string video_schedule = "video-tiny.schedule";
  SyntheticConfig data;
  std::uint64_t data_seed = 0;
  std::size_t test_per_class = 4;
  FusionConfig fusion;
  std::size_t projection_dim = 256;
  ContrastiveSource contrastive_source = ContrastiveSource::pre_fusion;
  LossConfig loss;
  AdamWConfig optim;
  TrainSettings train;
  ViewAugment augment;
  std::string base_dir = ".";  // not serialised

  std::string resolve(const std::string& path) const {
    std::filesystem::path p(path);
    return p.is_absolute() ? path : (std::filesystem::path(base_dir) / p).string();
  }

  ModelSpec model_spec() const {
    ModelSpec s;
    s.audio = StageSchedule::load(resolve(audio_schedule));
    s.video = StageSchedule::load(resolve(video_schedule));
    s.classes = data.classes;
    s.fusion = fusion;
    s.projection_dim = projection_dim;
    s.contrastive_source = contrastive_source;
    return s;
  }

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j, std::string base_dir = ".");

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      return from_json(nlohmann::json::parse(ss.str(), nullptr, true, true),
                       std::filesystem::path(path).parent_path().string());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file '" + path + "': " + e.what());
    }
  }
};

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["audio_schedule"] = audio_schedule;
  j["video_schedule"] = video_schedule;
  j["data"] = data;
  j["data"]["seed"] = data_seed;
  j["data"]["test_per_class"] = test_per_class;
  j["fusion"] = {{"blocks", fusion.blocks},       {"tokens", fusion.tokens},
                 {"heads", fusion.heads},         {"mlp_ratio", fusion.mlp_ratio},
                 {"mode", to_string(fusion.mode)}, {"ln_eps", fusion.ln_eps}};
  j["projection_dim"] = projection_dim;
  j["contrastive_source"] = to_string(contrastive_source);
  j["loss"] = {{"avc", loss.avc},
               {"imc", loss.imc},
               {"lambda1", loss.lambda1},
               {"lambda2", loss.lambda2},
               {"tau", loss.tau},
               {"avc_mode", loss.avc_mode == AvcMode::supervised ? "supervised" : "instance"}};
  j["optim"] = optim;
  j["train"] = {{"steps", train.steps},
                {"batch", train.batch},
                {"log_every", train.log_every},
                {"eval_every", train.eval_every},
                {"eval_views", train.eval_views},
                {"stop_at_full_accuracy", train.stop_at_full_accuracy},
                {"checkpoint", train.checkpoint}};
  j["augment"] = {{"time_mask", augment.audio_masks.time_mask},
                  {"freq_mask", augment.audio_masks.freq_mask},
                  {"flip", augment.flip}};
  return j;
}

inline RunConfig RunConfig::from_json(const nlohmann::json& j, std::string base_dir) {
  RunConfig c;
  c.base_dir = base_dir.empty() ? "." : std::move(base_dir);
  c.audio_schedule = j.value("audio_schedule", c.audio_schedule);
  c.video_schedule = j.value("video_schedule", c.video_schedule);
  if (j.contains("data")) {
    const auto& d = j["data"];
    c.data = d.get<SyntheticConfig>();
    c.data_seed = d.value("seed", c.data_seed);
    c.test_per_class = d.value("test_per_class", c.test_per_class);
  }
  if (j.contains("fusion")) {
    const auto& f = j["fusion"];
    c.fusion.blocks = f.value("blocks", c.fusion.blocks);
    c.fusion.tokens = f.value("tokens", c.fusion.tokens);
    c.fusion.heads = f.value("heads", c.fusion.heads);
    c.fusion.mlp_ratio = f.value("mlp_ratio", c.fusion.mlp_ratio);
    c.fusion.mode = bottleneck_mode_from(f.value("mode", to_string(c.fusion.mode)));
    c.fusion.ln_eps = f.value("ln_eps", c.fusion.ln_eps);
  }
  c.projection_dim = j.value("projection_dim", c.projection_dim);
  c.contrastive_source = contrastive_source_from(j.value("contrastive_source", to_string(c.contrastive_source)));
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.avc = l.value("avc", c.loss.avc);
    c.loss.imc = l.value("imc", c.loss.imc);
    c.loss.lambda1 = l.value("lambda1", c.loss.lambda1);
    c.loss.lambda2 = l.value("lambda2", c.loss.lambda2);
    c.loss.tau = l.value("tau", c.loss.tau);
    const auto mode = l.value("avc_mode", std::string("supervised"));
    if (mode == "instance") {
      c.loss.avc_mode = AvcMode::instance;
    } else if (mode != "supervised") {
      throw ConfigError("unknown avc_mode '" + mode + "'");
    }
  }
  if (j.contains("optim")) c.optim = j["optim"].get<AdamWConfig>();
  if (j.contains("train")) {
    const auto& t = j["train"];
    c.train.steps = t.value("steps", c.train.steps);
    c.train.batch = t.value("batch", c.train.batch);
    c.train.log_every = t.value("log_every", c.train.log_every);
    c.train.eval_every = t.value("eval_every", c.train.eval_every);
    c.train.eval_views = t.value("eval_views", c.train.eval_views);
    c.train.stop_at_full_accuracy = t.value("stop_at_full_accuracy", c.train.stop_at_full_accuracy);
    c.train.checkpoint = t.value("checkpoint", c.train.checkpoint);
  }
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    c.augment.audio_masks.time_mask = a.value("time_mask", c.augment.audio_masks.time_mask);
    c.augment.audio_masks.freq_mask = a.value("freq_mask", c.augment.audio_masks.freq_mask);
    c.augment.flip = a.value("flip", c.augment.flip);
  }
  if (c.train.batch < 2) throw ConfigError("train.batch must be at least 2");
  if (c.loss.tau <= 0) throw ConfigError("loss.tau must be positive");
  if (c.optim.lr <= 0) throw ConfigError("optim.lr must be positive");
  return c;
}

}  // namespace mmbt
