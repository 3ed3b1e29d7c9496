// Parameterised building blocks shared by the encoders, fusion and heads.
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mmbt/ops.hpp"
#include "mmbt/random.hpp"

namespace mmbt {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Parameters in a fixed, deterministic order (optimizer and checkpoint order).
template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

template <typename T>
std::size_t count_elements(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

template <typename T>
Tensor<T> trunc_normal_param(Shape shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> ones_param(Shape shape) {
  return Tensor<T>::full(std::move(shape), T(1), true);
}

inline std::string join_name(std::string_view prefix, std::string_view leaf) {
  if (prefix.empty()) return std::string(leaf);
  return std::string(prefix) + "." + std::string(leaf);
}

/// y = x W + b with W stored [in x out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  static Linear create(std::size_t in, std::size_t out, Rng& rng) {
    return {trunc_normal_param<T>({in, out}, rng), zeros_param<T>({out})};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(matmul(x, weight), bias); }

  void collect(ParamList<T>& out, std::string_view prefix) const {
    out.push_back({join_name(prefix, "weight"), weight});
    out.push_back({join_name(prefix, "bias"), bias});
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-6);

  static LayerNorm create(std::size_t d, T eps = T(1e-6)) {
    return {ones_param<T>({d}), zeros_param<T>({d}), eps};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, eps); }

  void collect(ParamList<T>& out, std::string_view prefix) const {
    out.push_back({join_name(prefix, "gain"), gain});
    out.push_back({join_name(prefix, "bias"), bias});
  }
};

/// fc2(gelu(fc1(x))).
template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  static Mlp create(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    return {Linear<T>::create(in, hidden, rng), Linear<T>::create(hidden, out, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }

  void collect(ParamList<T>& out, std::string_view prefix) const {
    fc1.collect(out, join_name(prefix, "fc1"));
    fc2.collect(out, join_name(prefix, "fc2"));
  }
};

}  // namespace mmbt
