// Training loop over the synthetic paired data, multi-view evaluation and the
// per-step log records.
#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmbt/config.hpp"
#include "mmbt/metrics.hpp"

namespace mmbt {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0;
  double ce = 0, avc = NAN, imc_v = NAN, imc_a = NAN, total = 0;
  double acc = 0;  // batch accuracy

  std::string line() const {
    auto term = [](double v) {
      if (std::isnan(v)) return std::string("off");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", v);
      return std::string(buf);
    };
    char lr_buf[32];
    std::snprintf(lr_buf, sizeof lr_buf, "%.3g", lr);
    return "step=" + std::to_string(step) + " lr=" + lr_buf + " ce=" + term(ce) +
           " avc=" + term(avc) + " imc_v=" + term(imc_v) + " imc_a=" + term(imc_a) +
           " total=" + term(total) + " acc=" + term(acc);
  }
};

struct EvalResult {
  double top1 = 0, top5 = 0;
  std::vector<std::vector<double>> probabilities;
  Embeddings fused;  // view-averaged post-fusion class tokens
  Assignment labels;
  Assignment predictions;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::optional<std::size_t> full_accuracy_step;  // first step with 100% train accuracy
  double train_accuracy = 0;
};

template <typename T>
class Trainer {
 public:
  Trainer(RunConfig cfg, ModelSpec spec, std::uint64_t seed)
      : cfg_(std::move(cfg)), seed_(seed), rng_(detail::mix_seed(seed, 2)) {
    Rng init(detail::mix_seed(seed, 1));
    model_ = MultimodalModel<T>(std::move(spec), init);
    check_data_fits();
    train_ = generate_synthetic(cfg_.data, cfg_.data_seed);
    auto test_cfg = cfg_.data;
    test_cfg.per_class = cfg_.test_per_class;
    test_ = generate_synthetic(test_cfg, detail::mix_seed(cfg_.data_seed, 7));
    optimizer_ = AdamW<T>(model_.parameters(), cfg_.optim);
    for (const auto& s : train_.samples) {
      auto v = paired_view(s, audio_frames(), video_frames(), 0, 1);
      main_audio_.push_back(v.audio.template to_tensor<T>());
      main_video_.push_back(v.video.template to_tensor<T>());
    }
  }

  Trainer(const RunConfig& cfg, std::uint64_t seed) : Trainer(cfg, cfg.model_spec(), seed) {}

  const RunConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  MultimodalModel<T>& model() { return model_; }
  const MultimodalModel<T>& model() const { return model_; }
  AdamW<T>& optimizer() { return optimizer_; }
  const AdamW<T>& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  const Dataset& train_set() const { return train_; }
  const Dataset& test_set() const { return test_; }
  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }

  std::size_t audio_frames() const { return model_.audio_extent()[1]; }
  std::size_t video_frames() const { return model_.video_extent()[0]; }

  /// Forward and loss on explicit sample indices, no parameter update.
  LossBundle<T> loss_on(const std::vector<std::size_t>& batch, Tensor<T>* logits_out = nullptr) {
    std::vector<ModelOutput<T>> rows;
    Labels labels;
    for (auto i : batch) {
      rows.push_back(model_(main_audio_[i], main_video_[i]));
      labels.push_back(train_.samples[i].class_id);
    }
    auto out = stack(rows);
    if (logits_out) *logits_out = out.logits;
    const auto& lc = cfg_.loss;
    const T tau = static_cast<T>(lc.tau);
    auto ce = ce_loss(out.logits, labels);
    Tensor<T> avc, imc_v, imc_a;
    if (lc.avc) {
      avc = lc.avc_mode == AvcMode::supervised
                ? avc_loss(out.audio_embed, out.video_embed, labels, model_.audio_projection(),
                           model_.video_projection(), tau)
                : alignment_loss(out.audio_embed, out.video_embed, model_.audio_projection(),
                                 model_.video_projection(), tau);
    }
    if (lc.imc) {
      std::vector<Tensor<T>> a2, v2;
      for (auto i : batch) {
        auto view = augmented_view(train_.samples[i], audio_frames(), video_frames(), cfg_.augment,
                                   rng_);
        auto [ea, ev] = model_.embed(view.audio.template to_tensor<T>(),
                                     view.video.template to_tensor<T>());
        a2.push_back(ea);
        v2.push_back(ev);
      }
      imc_v = imc_loss(out.video_embed, concat_rows(v2), labels, model_.video_projection(), tau);
      imc_a = imc_loss(out.audio_embed, concat_rows(a2), labels, model_.audio_projection(), tau);
    }
    return hybrid_loss(ce, avc, imc_v, imc_a, lc.lambda1, lc.lambda2, lc.tau);
  }

  /// One optimisation step on a random batch.
  StepLog step() {
    const auto batch = draw_batch();
    Tensor<T> logits;
    auto bundle = loss_on(batch, &logits);
    check_finite(bundle, logits);
    backward(bundle.total);
    const double lr = scheduled_lr(cfg_.optim, step_, cfg_.train.steps);
    optimizer_.step(lr);
    optimizer_.zero_grad();
    for (const auto& p : optimizer_.params()) {
      if (!all_finite(p.tensor)) {
        throw NumericError("non-finite value in parameter '" + p.name + "' after step " +
                           std::to_string(step_));
      }
    }
    StepLog log;
    log.step = step_;
    log.lr = lr;
    log.ce = bundle.ce.item();
    if (bundle.avc.defined()) log.avc = bundle.avc.item();
    if (bundle.imc_v.defined()) log.imc_v = bundle.imc_v.item();
    if (bundle.imc_a.defined()) log.imc_a = bundle.imc_a.item();
    log.total = bundle.total.item();
    std::size_t hits = 0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
      hits += argmax_row(logits, r) == train_.samples[batch[r]].class_id;
    }
    log.acc = static_cast<double>(hits) / static_cast<double>(batch.size());
    ++step_;
    return log;
  }

  /// Runs until cfg.train.steps (counting from the current step).
  TrainResult run(std::ostream* out = nullptr) {
    TrainResult result;
    const auto& tc = cfg_.train;
    while (step_ < tc.steps) {
      auto log = step();
      result.log.push_back(log);
      if (out && tc.log_every && (log.step % tc.log_every == 0 || step_ == tc.steps)) {
        *out << log.line() << "\n";
      }
      if (tc.eval_every && step_ % tc.eval_every == 0) {
        const double acc = evaluate(train_, 1).top1;
        if (out) *out << "step=" << log.step << " train_acc=" << acc << "\n";
        if (acc == 1.0 && !result.full_accuracy_step) result.full_accuracy_step = step_;
        if (acc == 1.0 && tc.stop_at_full_accuracy) break;
      }
    }
    result.train_accuracy = evaluate(train_, 1).top1;
    if (result.train_accuracy == 1.0 && !result.full_accuracy_step) {
      result.full_accuracy_step = step_;
    }
    return result;
  }

  /// Softmax probabilities averaged over `views` evenly spaced temporal crops.
  EvalResult evaluate(const Dataset& data, std::size_t views,
                      const ForwardOptions& opts = {}) const {
    NoGradGuard no_grad;
    EvalResult r;
    r.labels = data.labels();
    for (const auto& s : data.samples) {
      std::vector<double> prob(model_.spec().classes, 0.0);
      std::vector<double> fused(2 * model_.width(), 0.0);
      for (std::size_t v = 0; v < views; ++v) {
        auto view = paired_view(s, audio_frames(), video_frames(), v, views);
        auto out = model_(view.audio.template to_tensor<T>(), view.video.template to_tensor<T>(),
                          opts);
        auto p = softmax_rows(out.logits);
        for (std::size_t c = 0; c < prob.size(); ++c) prob[c] += static_cast<double>(p[c]);
        for (std::size_t k = 0; k < fused.size(); ++k) fused[k] += static_cast<double>(out.fused[k]);
      }
      if (views > 1) {
        for (auto& x : prob) x /= static_cast<double>(views);
        for (auto& x : fused) x /= static_cast<double>(views);
      }
      std::size_t best = 0;
      for (std::size_t c = 1; c < prob.size(); ++c)
        if (prob[c] > prob[best]) best = c;
      r.predictions.push_back(best);
      r.probabilities.push_back(std::move(prob));
      r.fused.push_back(std::move(fused));
    }
    r.top1 = top_k_accuracy(r.probabilities, r.labels, 1);
    r.top5 = top_k_accuracy(r.probabilities, r.labels, 5);
    return r;
  }

 private:
  void check_data_fits() const {
    const auto& d = cfg_.data;
    const auto& a = model_.audio_extent();
    const auto& v = model_.video_extent();
    if (d.mel_bins != a[0] || d.audio_frames < a[1]) {
      throw ConfigError("synthetic spectrograms " + std::to_string(d.mel_bins) + "x" +
                        std::to_string(d.audio_frames) + " do not cover the audio input " +
                        shape_string(a));
    }
    if (d.video_frames < v[0] || d.height != v[1] || d.width != v[2]) {
      throw ConfigError("synthetic clips do not cover the video input " + shape_string(v));
    }
  }

  std::vector<std::size_t> draw_batch() {
    std::vector<std::size_t> idx(train_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t b = std::min(cfg_.train.batch, idx.size());
    for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + rng_.index(idx.size() - i)]);
    idx.resize(b);
    return idx;
  }

  static std::size_t argmax_row(const Tensor<T>& x, std::size_t r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < x.dim(1); ++c)
      if (x.at(r, c) > x.at(r, best)) best = c;
    return best;
  }

  static void check_finite(const LossBundle<T>& b, const Tensor<T>& logits) {
    const std::pair<const char*, const Tensor<T>*> named[] = {
        {"logits", &logits}, {"ce", &b.ce}, {"avc", &b.avc},
        {"imc_v", &b.imc_v}, {"imc_a", &b.imc_a}, {"total", &b.total}};
    for (const auto& [name, t] : named) {
      if (t->defined() && !all_finite(*t)) {
        throw NumericError(std::string("non-finite value in ") + name);
      }
    }
  }

  RunConfig cfg_;
  std::uint64_t seed_ = 0;
  Rng rng_;
  MultimodalModel<T> model_;
  AdamW<T> optimizer_;
  Dataset train_, test_;
  std::vector<Tensor<T>> main_audio_, main_video_;
  std::size_t step_ = 0;
};

}  // namespace mmbt
