// mmbt command line: train, eval, count, gradcheck, synth, mel.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "mmbt/mmbt.hpp"

using namespace mmbt;

namespace {

int run_train(const std::string& config_path, std::uint64_t seed, long steps,
              const std::string& out_path) {
  auto cfg = RunConfig::load(config_path);
  if (steps >= 0) cfg.train.steps = static_cast<std::size_t>(steps);
  if (!out_path.empty()) cfg.train.checkpoint = out_path;
  Trainer<float> tr(cfg, seed);
  std::cout << "# params=" << count_elements(tr.model().parameters())
            << " train=" << tr.train_set().size() << " test=" << tr.test_set().size() << "\n";
  auto result = tr.run(&std::cout);
  auto test = tr.evaluate(tr.test_set(), cfg.train.eval_views);
  std::cout << "final train_acc=" << result.train_accuracy << " test_top1=" << test.top1
            << " test_top5=" << test.top5 << "\n";
  if (!cfg.train.checkpoint.empty()) {
    save_checkpoint(cfg.train.checkpoint, capture(tr));
    std::cout << "checkpoint " << cfg.train.checkpoint << "\n";
  }
  return 0;
}

int run_eval(const std::string& ckpt_path, std::size_t views, const std::string& split,
             bool json) {
  auto ckpt = load_checkpoint(ckpt_path);
  if (ckpt.scalar_bytes != sizeof(float)) throw ConfigError("eval expects a float checkpoint");
  auto tr = trainer_from_checkpoint<float>(ckpt);
  const auto& data = split == "train" ? tr.train_set() : tr.test_set();
  auto r = tr.evaluate(data, views);
  auto clusters = cluster_metrics(r.fused, r.labels, tr.model().spec().classes);
  if (json) {
    nlohmann::json j{{"split", split},       {"views", views},   {"samples", data.size()},
                     {"top1", r.top1},       {"top5", r.top5},   {"ari", clusters.ari},
                     {"homogeneity", clusters.homogeneity},      {"step", ckpt.step}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "split=" << split << " views=" << views << " samples=" << data.size()
              << " top1=" << r.top1 << " top5=" << r.top5 << " ari=" << clusters.ari
              << " hs=" << clusters.homogeneity << "\n";
  }
  return 0;
}

int run_count(const std::string& schedule_path, bool json, const std::vector<std::size_t>& fusion) {
  if (!fusion.empty()) {
    if (fusion.size() != 4) throw ConfigError("--fusion takes N M L K");
    auto r = fusion_cost_report(fusion[0], fusion[1], fusion[2], fusion[3]);
    if (json) {
      std::cout << r.to_json().dump(2) << "\n";
    } else {
      std::cout << "bottleneck=" << r.bottleneck_total << " merged=" << r.merged_total
                << " ratio=" << r.ratio << " precondition=" << r.per_block.precondition << "\n";
    }
    if (schedule_path.empty()) return 0;
  }
  if (schedule_path.empty()) throw ConfigError("count needs --schedule or --fusion");
  auto report = cost_report(StageSchedule::load(schedule_path));
  std::cout << (json ? report.to_json().dump(2) + "\n" : report.to_text());
  return 0;
}

int run_gradcheck(const std::string& schedule_path, std::size_t seeds, std::size_t entries) {
  auto schedule = StageSchedule::load(schedule_path);
  bool ok = true;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    Rng rng(seed);
    Encoder<double> enc(schedule, rng);
    auto params = enc.parameters();
    for (auto& p : params)
      for (auto& v : p.tensor.mutable_values()) v = rng.normal(0.0, 0.1);
    const auto shape = enc.input_shape();
    std::vector<double> x(numel(shape));
    for (auto& v : x) v = rng.normal();
    Tensor<double> input(shape, x, true);
    params.push_back({"input", input});
    std::vector<double> w(enc.width());
    for (auto& v : w) v = rng.normal();
    auto r = gradcheck([&] { return weighted_sum(enc(input).class_token(), w); }, params,
                       {.max_entries_per_leaf = entries, .seed = seed});
    const bool pass = r.passed(1e-4);
    ok &= pass;
    std::printf("%s seed=%llu entries=%zu max_rel_error=%.3e worst=%s[%zu]\n", pass ? "PASS" : "FAIL",
                static_cast<unsigned long long>(seed), r.entries_checked, r.max_rel_error,
                r.worst_leaf.c_str(), r.worst_index);
  }
  return ok ? 0 : 1;
}

int run_synth(const std::string& out_dir, const std::string& config_path, std::uint64_t seed) {
  SyntheticConfig cfg;
  if (!config_path.empty()) cfg = RunConfig::load(config_path).data;
  auto d = generate_synthetic(cfg, seed);
  write_dataset(d, out_dir);
  std::cout << "wrote " << d.size() << " samples to " << out_dir << "\n";
  return 0;
}

int run_mel(const std::string& wav, const std::string& out, std::size_t mels, std::size_t frames) {
  MelConfig cfg;
  cfg.n_mels = mels;
  cfg.target_frames = frames;
  auto s = log_mel(read_wav(wav), cfg);
  save_spectrogram(out, s);
  std::cout << "wrote " << s.bins << "x" << s.frames << " spectrogram to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale multimodal bottleneck transformer toolkit"};
  app.require_subcommand(1);

  std::string config, ckpt, schedule, out, split = "test", wav;
  std::uint64_t seed = 0;
  long steps = -1;
  std::size_t views = 5, seeds = 5, entries = 4, mels = 128, frames = 1024;
  bool json = false;
  std::vector<std::size_t> fusion;

  auto* train = app.add_subcommand("train", "train on synthetic paired data");
  train->add_option("--config", config, "run config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "training seed");
  train->add_option("--steps", steps, "override train.steps");
  train->add_option("--out", out, "checkpoint path (overrides train.checkpoint)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with multi-view inference");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--views", views, "temporal crops averaged per sample")->check(CLI::PositiveNumber);
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval->add_flag("--json", json, "machine-readable output");

  auto* count = app.add_subcommand("count", "analytical parameter/FLOP/activation report");
  count->add_option("--schedule", schedule, "schedule file")->check(CLI::ExistingFile);
  count->add_option("--fusion", fusion, "fusion attention cost for N M L K")->expected(4);
  count->add_flag("--json", json, "machine-readable output");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of an encoder");
  grad->add_option("--schedule", schedule, "schedule file")->required()->check(CLI::ExistingFile);
  grad->add_option("--seeds", seeds, "number of seeds");
  grad->add_option("--entries", entries, "entries probed per parameter tensor");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--out", out, "output directory")->required();
  synth->add_option("--config", config, "take data settings from a run config")
      ->check(CLI::ExistingFile);
  synth->add_option("--seed", seed, "data seed");

  auto* mel = app.add_subcommand("mel", "log-mel spectrogram of a 16-bit PCM WAV file");
  mel->add_option("--wav", wav, "input WAV")->required()->check(CLI::ExistingFile);
  mel->add_option("--out", out, "output .spec file")->required();
  mel->add_option("--mels", mels, "mel bands");
  mel->add_option("--frames", frames, "output frames");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(config, seed, steps, out);
    if (*eval) return run_eval(ckpt, views, split, json);
    if (*count) return run_count(schedule, json, fusion);
    if (*grad) return run_gradcheck(schedule, seeds, entries);
    if (*synth) return run_synth(out, config, seed);
    if (*mel) return run_mel(wav, out, mels, frames);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
