// AdamW with decoupled weight decay and a linear-warmup constant schedule.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmbt/layers.hpp"

namespace mmbt {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_fraction = 0.05;
};

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"lr", c.lr},       {"beta1", c.beta1},
       {"beta2", c.beta2}, {"eps", c.eps},
       {"weight_decay", c.weight_decay}, {"warmup_fraction", c.warmup_fraction}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
}

/// Linear warmup from lr/warmup to lr over the first warmup steps, then constant.
inline double scheduled_lr(const AdamWConfig& c, std::size_t step, std::size_t total_steps) {
  const auto warmup = static_cast<std::size_t>(std::ceil(c.warmup_fraction * total_steps));
  if (warmup == 0 || step >= warmup) return c.lr;
  return c.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

template <typename T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParamList<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), T(0));
      v_.emplace_back(p.tensor.size(), T(0));
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  const ParamList<T>& params() const { return params_; }
  std::size_t steps() const { return t_; }

  /// Biases, norm gains and other 1-axis tensors are not decayed.
  static bool decays(const Tensor<T>& p) { return p.rank() >= 2; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto p = params_[i].tensor;
      if (!p.has_grad()) continue;
      auto w = p.mutable_values();
      auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const double wd = decays(p) ? cfg_.weight_decay : 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        m[k] = static_cast<T>(cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk);
        v[k] = static_cast<T>(cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk);
        const double mhat = m[k] / bc1, vhat = v[k] / bc2;
        w[k] = static_cast<T>(w[k] - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * w[k]));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // State access for checkpoints.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  ParamList<T> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mmbt
