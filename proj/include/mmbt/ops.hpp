// Differentiable operations over mmbt::Tensor.
//
// Matrices are row-major; token sets are [tokens x channels]. Broadcasting is
// limited to add_bias (a row vector over the last axis) and scalar ops.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mmbt/tensor.hpp"

namespace mmbt {

enum class PoolMode { max, avg };

inline const char* to_string(PoolMode m) { return m == PoolMode::max ? "max" : "avg"; }

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

template <typename T>
inline Node<T>* grad_target(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  return p->requires_grad ? p : nullptr;
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " + shape_string(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a) + " vs " + shape_string(b));
  }
}

/// Row-major strides of a grid.
inline std::vector<std::size_t> grid_strides(std::span<const std::size_t> extents) {
  std::vector<std::size_t> strides(extents.size(), 1);
  for (std::size_t a = extents.size(); a-- > 1;) strides[a - 1] = strides[a] * extents[a];
  return strides;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [] {
    return [](Node<T>& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        if (auto* p = detail::grad_target(self, k)) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      }
    };
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [] {
    return [](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (auto* p = detail::grad_target(self, 1)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [] {
    return [](Node<T>& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
      }
      if (auto* p = detail::grad_target(self, 1)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
      }
    };
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result<T>(x.shape(), std::move(out), "scale", {x}, [factor] {
    return [factor](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
      }
    };
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + offset;
  return detail::make_result<T>(x.shape(), std::move(out), "add_scalar", {x}, [] {
    return [](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  });
}

/// x[..., d] + bias[d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = x.shape().back();
  if (bias.size() != d) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match last axis of " + shape_string(x.shape()));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % d];
  return detail::make_result<T>(x.shape(), std::move(out), "add_bias", {x, bias}, [d] {
    return [d](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (auto* p = detail::grad_target(self, 1)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
      }
    };
  });
}

/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] / std::numbers::sqrt2_v<T>));
  }
  return detail::make_result<T>(x.shape(), std::move(out), "gelu", {x}, [] {
    return [](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        const auto& xv = p->value;
        const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        for (std::size_t i = 0; i < g.size(); ++i) {
          T cdf = T(0.5) * (T(1) + std::erf(xv[i] / std::numbers::sqrt2_v<T>));
          T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
          g[i] += self.grad[i] * (cdf + xv[i] * pdf);
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (auto v : x.values()) total += v;
  return detail::make_result<T>(Shape{1}, {total}, "sum", {x}, [] {
    return [](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (auto& v : g) v += self.grad[0];
      }
    };
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// sum(x * weights) with constant weights of the same shape.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::vector<T> weights) {
  if (weights.size() != x.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) +
                         " weights for " + shape_string(x.shape()));
  }
  T total = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) total += x[i] * weights[i];
  return detail::make_result<T>(Shape{1}, {total}, "weighted_sum", {x},
                                [w = std::move(weights)]() mutable {
    return [w = std::move(w)](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) +
                         " as " + shape_string(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {x}, [] {
    return [](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(x.size());
  detail::MatrixMap<T>(out.data(), c, r) =
      detail::ConstMatrixMap<T>(x.values().data(), r, c).transpose();
  return detail::make_result<T>(Shape{c, r}, std::move(out), "transpose", {x}, [r, c] {
    return [r, c](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        detail::MatrixMap<T>(g.data(), r, c) +=
            detail::ConstMatrixMap<T>(self.grad.data(), c, r).transpose();
      }
    };
  });
}

/// Rows [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x.shape(), 2, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_string(x.shape()));
  }
  const std::size_t c = x.dim(1);
  std::vector<T> out(x.values().begin() + begin * c, x.values().begin() + end * c);
  return detail::make_result<T>(Shape{end - begin, c}, std::move(out), "slice_rows", {x},
                                [begin, c] {
    return [begin, c](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
      }
    };
  });
}

/// Columns [begin, end) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x.shape(), 2, "slice_cols");
  if (begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_string(x.shape()));
  }
  const std::size_t r = x.dim(0), c = x.dim(1), w = end - begin;
  std::vector<T> out(r * w);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(x.values().begin() + i * c + begin, w, out.begin() + i * w);
  }
  return detail::make_result<T>(Shape{r, w}, std::move(out), "slice_cols", {x},
                                [r, c, w, begin] {
    return [r, c, w, begin](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
      }
    };
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().shape().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_rows");
    if (p.dim(1) != c) {
      throw DimensionError("concat_rows: width " + std::to_string(p.dim(1)) +
                           " vs " + std::to_string(c));
    }
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result<T>(Shape{rows, c}, std::move(out), "concat_rows",
                                std::span<const Tensor<T>>(parts), [] {
    return [](Node<T>& self) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        const std::size_t n = self.parents[k]->value.size();
        if (auto* p = detail::grad_target(self, k)) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    };
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    detail::require_rank(p.shape(), 2, "concat_cols");
    if (p.dim(0) != r) {
      throw DimensionError("concat_cols: rows " + std::to_string(p.dim(0)) +
                           " vs " + std::to_string(r));
    }
    cols += p.dim(1);
  }
  std::vector<T> out(r * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(p.values().begin() + i * w, w, out.begin() + i * cols + offset);
    }
    offset += w;
  }
  return detail::make_result<T>(Shape{r, cols}, std::move(out), "concat_cols",
                                std::span<const Tensor<T>>(parts), [r, cols] {
    return [r, cols](Node<T>& self) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        const std::size_t w = self.parents[k]->shape[1];
        if (auto* p = detail::grad_target(self, k)) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * cols + offset + j];
        }
        offset += w;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) +
                         " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::MatrixMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatrixMap<T>(a.values().data(), m, k) *
      detail::ConstMatrixMap<T>(b.values().data(), k, n);
  return detail::make_result<T>(Shape{m, n}, std::move(out), "matmul", {a, b}, [m, k, n] {
    return [m, k, n](Node<T>& self) {
      detail::ConstMatrixMap<T> g(self.grad.data(), m, n);
      if (auto* p = detail::grad_target(self, 0)) {
        detail::MatrixMap<T>(p->grad_buffer().data(), m, k).noalias() +=
            g * detail::ConstMatrixMap<T>(self.parents[1]->value.data(), k, n).transpose();
      }
      if (auto* p = detail::grad_target(self, 1)) {
        detail::MatrixMap<T>(p->grad_buffer().data(), k, n).noalias() +=
            detail::ConstMatrixMap<T>(self.parents[0]->value.data(), m, k).transpose() * g;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Normalisation and softmax (over the trailing axis)

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * n;
    T* o = out.data() + r * n;
    T mx = *std::max_element(in, in + n);
    if (std::isnan(mx)) mx = T(0);  // let NaN propagate through exp
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return detail::make_result<T>(x.shape(), std::move(out), "softmax_rows", {x}, [n, rows] {
    return [n, rows](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = self.value.data() + r * n;
          const T* gy = self.grad.data() + r * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
        }
      }
    };
  });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * n;
    T* o = out.data() + r * n;
    T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  return detail::make_result<T>(x.shape(), std::move(out), "log_softmax_rows", {x},
                                [n, rows] {
    return [n, rows](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = self.value.data() + r * n;
          const T* gy = self.grad.data() + r * n;
          T total = 0;
          for (std::size_t j = 0; j < n; ++j) total += gy[j];
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += gy[j] - std::exp(y[j]) * total;
        }
      }
    };
  });
}

/// Per-row standardisation followed by gain * x_hat + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6)) {
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " vs channels of " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> normed(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normed[r * d + j] = (in[j] - mu) * inv_std[r];
      out[r * d + j] = normed[r * d + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), "layer_norm", {x, gain, bias},
                                [&normed, &inv_std, d, rows] {
    return [normed = std::move(normed), inv_std = std::move(inv_std), d, rows](Node<T>& self) {
      const auto& gain_v = self.parents[1]->value;
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        std::vector<T> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = self.grad[r * d + j] * gain_v[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * normed[r * d + j];
          }
          mean_d /= static_cast<T>(d);
          mean_dx /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            g[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - normed[r * d + j] * mean_dx);
          }
        }
      }
      if (auto* p = detail::grad_target(self, 1)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i] * normed[i];
      }
      if (auto* p = detail::grad_target(self, 2)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % d] += self.grad[i];
      }
    };
  });
}

/// Rows scaled to unit L2 norm.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += x[r * d + j] * x[r * d + j];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] / norms[r];
  }
  return detail::make_result<T>(x.shape(), std::move(out), "normalize_rows", {x},
                                [&norms, d, rows] {
    return [norms = std::move(norms), d, rows](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = self.value.data() + r * d;
          const T* gy = self.grad.data() + r * d;
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - y[j] * dot) / norms[r];
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation) via patch extraction

/// Output extent of one convolved axis.
inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t padding) {
  if (in + 2 * padding < kernel) {
    throw ConfigError("convolution: padded extent " + std::to_string(in + 2 * padding) +
                      " smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

/// Smallest symmetric padding making `in` convolve to exactly `out`.
inline std::size_t derive_padding(std::size_t in, std::size_t kernel, std::size_t stride,
                                  std::size_t out) {
  for (std::size_t p = 0; p < kernel; ++p) {
    if (in + 2 * p >= kernel && conv_out_extent(in, kernel, stride, p) == out) return p;
  }
  throw ConfigError("convolution: no padding maps extent " + std::to_string(in) +
                    " with kernel " + std::to_string(kernel) + " stride " +
                    std::to_string(stride) + " to " + std::to_string(out));
}

struct ConvGeometry {
  std::size_t channels = 0;
  std::vector<std::size_t> in, kernel, stride, padding, out;

  std::size_t patch_size() const { return channels * numel(kernel); }
  std::size_t positions() const { return numel(out); }
};

inline ConvGeometry make_conv_geometry(const Shape& input, std::span<const std::size_t> kernel,
                                       std::span<const std::size_t> stride,
                                       std::span<const std::size_t> padding) {
  const std::size_t axes = input.size() - 1;
  if (input.size() < 2 || kernel.size() != axes || stride.size() != axes ||
      padding.size() != axes) {
    throw DimensionError("convolution: input " + shape_string(input) +
                         " does not match kernel rank " + std::to_string(kernel.size()));
  }
  ConvGeometry geo;
  geo.channels = input[0];
  geo.in.assign(input.begin() + 1, input.end());
  geo.kernel.assign(kernel.begin(), kernel.end());
  geo.stride.assign(stride.begin(), stride.end());
  geo.padding.assign(padding.begin(), padding.end());
  for (std::size_t a = 0; a < axes; ++a) {
    if (stride[a] == 0) throw ConfigError("convolution: zero stride");
    geo.out.push_back(conv_out_extent(geo.in[a], kernel[a], stride[a], padding[a]));
  }
  return geo;
}

namespace detail {

/// For every (output position, patch element) the flat input index, or -1 in
/// the zero-padding halo.
inline std::vector<std::int64_t> patch_index(const ConvGeometry& geo) {
  const std::size_t axes = geo.in.size();
  const auto in_strides = grid_strides(geo.in);
  const auto out_strides = grid_strides(geo.out);
  const auto k_strides = grid_strides(geo.kernel);
  const std::size_t kvol = numel(geo.kernel);
  const std::size_t in_vol = numel(geo.in);
  std::vector<std::int64_t> index(geo.positions() * geo.patch_size());
  std::vector<std::size_t> o(axes), k(axes);
  for (std::size_t pos = 0; pos < geo.positions(); ++pos) {
    for (std::size_t a = 0; a < axes; ++a) o[a] = (pos / out_strides[a]) % geo.out[a];
    for (std::size_t kk = 0; kk < kvol; ++kk) {
      std::int64_t flat = 0;
      bool inside = true;
      for (std::size_t a = 0; a < axes; ++a) {
        k[a] = (kk / k_strides[a]) % geo.kernel[a];
        std::int64_t coord = static_cast<std::int64_t>(o[a] * geo.stride[a] + k[a]) -
                             static_cast<std::int64_t>(geo.padding[a]);
        if (coord < 0 || coord >= static_cast<std::int64_t>(geo.in[a])) {
          inside = false;
          break;
        }
        flat += coord * static_cast<std::int64_t>(in_strides[a]);
      }
      for (std::size_t c = 0; c < geo.channels; ++c) {
        index[pos * geo.patch_size() + c * kvol + kk] =
            inside ? static_cast<std::int64_t>(c * in_vol) + flat : -1;
      }
    }
  }
  return index;
}

}  // namespace detail

/// [C x spatial...] -> [positions x (C * prod(kernel))]; column order matches a
/// kernel tensor laid out [C_out x C x k...].
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, const ConvGeometry& geo) {
  auto index = detail::patch_index(geo);
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = index[i] < 0 ? T(0) : x[index[i]];
  return detail::make_result<T>(Shape{geo.positions(), geo.patch_size()}, std::move(out),
                                "im2col", {x}, [&index] {
    return [index = std::move(index)](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i) {
          if (index[i] >= 0) g[index[i]] += self.grad[i];
        }
      }
    };
  });
}

/// Convolution returning tokens: [positions x C_out].
template <typename T>
Tensor<T> conv_tokens(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                      std::span<const std::size_t> stride, std::span<const std::size_t> padding) {
  if (weight.rank() != x.rank() + 1 || weight.dim(1) != x.dim(0)) {
    throw DimensionError("convolution: kernel " + shape_string(weight.shape()) +
                         " incompatible with input " + shape_string(x.shape()));
  }
  std::vector<std::size_t> kernel(weight.shape().begin() + 2, weight.shape().end());
  auto geo = make_conv_geometry(x.shape(), kernel, stride, padding);
  const std::size_t c_out = weight.dim(0);
  auto cols = im2col(x, geo);
  auto w2d = reshape(weight, Shape{c_out, geo.patch_size()});
  return add_bias(matmul(cols, transpose(w2d)), bias);
}

namespace detail {
template <typename T>
Tensor<T> conv_nd(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                  std::span<const std::size_t> stride, std::span<const std::size_t> padding) {
  auto tokens = conv_tokens(x, weight, bias, stride, padding);
  std::vector<std::size_t> kernel(weight.shape().begin() + 2, weight.shape().end());
  auto geo = make_conv_geometry(x.shape(), kernel, stride, padding);
  Shape out{weight.dim(0)};
  out.insert(out.end(), geo.out.begin(), geo.out.end());
  return reshape(transpose(tokens), out);
}
}  // namespace detail

/// x [C x H x W], weight [C_out x C x kh x kw] -> [C_out x H' x W'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::span<const std::size_t> stride, std::span<const std::size_t> padding) {
  detail::require_rank(x.shape(), 3, "conv2d");
  return detail::conv_nd(x, weight, bias, stride, padding);
}

/// x [C x T x H x W], weight [C_out x C x kt x kh x kw] -> [C_out x T' x H' x W'].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::span<const std::size_t> stride, std::span<const std::size_t> padding) {
  detail::require_rank(x.shape(), 4, "conv3d");
  return detail::conv_nd(x, weight, bias, stride, padding);
}

// ---------------------------------------------------------------------------
// Token-grid pooling

inline std::vector<std::size_t> pooled_extents(std::span<const std::size_t> extents,
                                               std::span<const std::size_t> strides) {
  if (extents.size() != strides.size()) {
    throw ConfigError("pool_grid: " + std::to_string(strides.size()) + " strides for a " +
                      std::to_string(extents.size()) + "-axis grid");
  }
  std::vector<std::size_t> out(extents.size());
  for (std::size_t a = 0; a < extents.size(); ++a) {
    if (strides[a] == 0 || extents[a] % strides[a] != 0) {
      throw ConfigError("pool_grid: stride " + std::to_string(strides[a]) +
                        " does not divide extent " + std::to_string(extents[a]) +
                        " on axis " + std::to_string(a));
    }
    out[a] = extents[a] / strides[a];
  }
  return out;
}

inline bool is_identity_stride(std::span<const std::size_t> strides) {
  return std::all_of(strides.begin(), strides.end(), [](std::size_t s) { return s == 1; });
}

/// Non-overlapping pooling (kernel == stride) over the token grid of
/// x [(has_cls + prod(extents)) x d]. The class row passes through untouched.
template <typename T>
Tensor<T> pool_grid(const Tensor<T>& x, std::span<const std::size_t> extents,
                    std::span<const std::size_t> strides, PoolMode mode, bool has_cls) {
  detail::require_rank(x.shape(), 2, "pool_grid");
  const std::size_t offset = has_cls ? 1 : 0;
  if (x.dim(0) != numel(Shape(extents.begin(), extents.end())) + offset) {
    throw DimensionError("pool_grid: " + std::to_string(x.dim(0)) + " rows for grid " +
                         shape_string(Shape(extents.begin(), extents.end())) +
                         (has_cls ? " plus class token" : ""));
  }
  const auto out_ext = pooled_extents(extents, strides);
  const std::size_t d = x.dim(1);
  const std::size_t axes = extents.size();
  const std::size_t n_out = numel(out_ext);
  const std::size_t window = numel(Shape(strides.begin(), strides.end()));
  const auto in_strides = detail::grid_strides(extents);
  const auto out_strides = detail::grid_strides(out_ext);
  const auto win_strides = detail::grid_strides(strides);

  // Input row of every (output cell, window element).
  std::vector<std::uint32_t> rows(n_out * window);
  for (std::size_t o = 0; o < n_out; ++o) {
    for (std::size_t w = 0; w < window; ++w) {
      std::size_t flat = 0;
      for (std::size_t a = 0; a < axes; ++a) {
        std::size_t oc = (o / out_strides[a]) % out_ext[a];
        std::size_t wc = (w / win_strides[a]) % strides[a];
        flat += (oc * strides[a] + wc) * in_strides[a];
      }
      rows[o * window + w] = static_cast<std::uint32_t>(flat + offset);
    }
  }

  std::vector<T> out((n_out + offset) * d);
  std::vector<std::uint32_t> argmax;
  if (has_cls) std::copy_n(x.values().begin(), d, out.begin());
  if (mode == PoolMode::max) argmax.resize(n_out * d);
  for (std::size_t o = 0; o < n_out; ++o) {
    T* dst = out.data() + (o + offset) * d;
    for (std::size_t j = 0; j < d; ++j) {
      if (mode == PoolMode::max) {
        std::uint32_t best = rows[o * window];
        T best_v = x[best * d + j];
        for (std::size_t w = 1; w < window; ++w) {
          std::uint32_t r = rows[o * window + w];
          if (x[r * d + j] > best_v) {
            best_v = x[r * d + j];
            best = r;
          }
        }
        dst[j] = best_v;
        argmax[o * d + j] = best;
      } else {
        T acc = 0;
        for (std::size_t w = 0; w < window; ++w) acc += x[rows[o * window + w] * d + j];
        dst[j] = acc / static_cast<T>(window);
      }
    }
  }
  return detail::make_result<T>(Shape{n_out + offset, d}, std::move(out), "pool_grid", {x},
                                [&] {
    return [rows = std::move(rows), argmax = std::move(argmax), mode, offset, d, n_out,
            window](Node<T>& self) {
      if (auto* p = detail::grad_target(self, 0)) {
        auto& g = p->grad_buffer();
        for (std::size_t j = 0; j < offset * d; ++j) g[j] += self.grad[j];
        for (std::size_t o = 0; o < n_out; ++o) {
          const T* go = self.grad.data() + (o + offset) * d;
          for (std::size_t j = 0; j < d; ++j) {
            if (mode == PoolMode::max) {
              g[argmax[o * d + j] * d + j] += go[j];
            } else {
              const T share = go[j] / static_cast<T>(window);
              for (std::size_t w = 0; w < window; ++w) g[rows[o * window + w] * d + j] += share;
            }
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Decomposed relative-position bias

/// Per-axis lookup from (query coordinate, key coordinate) to a row of that
/// axis's embedding table. Query and key grids may differ in resolution;
/// coordinates are scaled onto the finer grid before taking the offset.
struct RelPosIndex {
  std::vector<std::size_t> q_extents, kv_extents;
  std::vector<std::size_t> rows;                    // table rows per axis
  std::vector<std::vector<std::uint32_t>> lookup;   // [axis][qc * kv_ext + kc]

  static std::size_t table_rows(std::size_t q_ext, std::size_t kv_ext) {
    return 2 * std::max(q_ext, kv_ext) - 1;
  }

  static RelPosIndex build(std::span<const std::size_t> q_extents,
                           std::span<const std::size_t> kv_extents) {
    if (q_extents.size() != kv_extents.size()) {
      throw ConfigError("relative positions: query and key grids differ in rank");
    }
    RelPosIndex idx;
    idx.q_extents.assign(q_extents.begin(), q_extents.end());
    idx.kv_extents.assign(kv_extents.begin(), kv_extents.end());
    for (std::size_t a = 0; a < q_extents.size(); ++a) {
      const std::size_t q = q_extents[a], k = kv_extents[a];
      const std::size_t q_ratio = std::max<std::size_t>(k / q, 1);
      const std::size_t k_ratio = std::max<std::size_t>(q / k, 1);
      const std::size_t n_rows = table_rows(q, k);
      std::vector<std::uint32_t> table(q * k);
      for (std::size_t qc = 0; qc < q; ++qc) {
        for (std::size_t kc = 0; kc < k; ++kc) {
          std::int64_t off = static_cast<std::int64_t>(qc * q_ratio) -
                             static_cast<std::int64_t>(kc * k_ratio) +
                             static_cast<std::int64_t>((k - 1) * k_ratio);
          off = std::clamp<std::int64_t>(off, 0, static_cast<std::int64_t>(n_rows) - 1);
          table[qc * k + kc] = static_cast<std::uint32_t>(off);
        }
      }
      idx.rows.push_back(n_rows);
      idx.lookup.push_back(std::move(table));
    }
    return idx;
  }
};

/// bias[i][j] = sum_axis qr[axis][i][lookup(i, j)], zero on class-token rows
/// and columns. qr[axis] is [n_q x rows_axis], i.e. Q times the axis table
/// transposed, so bias_ij = Q_i . sum_axis R_axis[offset_axis(i, j)].
template <typename T>
Tensor<T> rel_pos_bias(const std::vector<Tensor<T>>& qr, const RelPosIndex& index,
                       bool has_cls) {
  const std::size_t axes = index.rows.size();
  if (qr.size() != axes) throw DimensionError("rel_pos_bias: axis count mismatch");
  const std::size_t offset = has_cls ? 1 : 0;
  const std::size_t nq_grid = numel(index.q_extents);
  const std::size_t nk_grid = numel(index.kv_extents);
  const std::size_t nq = nq_grid + offset, nk = nk_grid + offset;
  for (std::size_t a = 0; a < axes; ++a) {
    if (qr[a].rank() != 2 || qr[a].dim(0) != nq || qr[a].dim(1) != index.rows[a]) {
      throw DimensionError("rel_pos_bias: axis " + std::to_string(a) + " projection " +
                           shape_string(qr[a].shape()) + " expected [" +
                           std::to_string(nq) + "x" + std::to_string(index.rows[a]) + "]");
    }
  }
  const auto qs = detail::grid_strides(index.q_extents);
  const auto ks = detail::grid_strides(index.kv_extents);
  // Per-token coordinate along each axis.
  std::vector<std::vector<std::uint32_t>> qcoord(axes, std::vector<std::uint32_t>(nq_grid));
  std::vector<std::vector<std::uint32_t>> kcoord(axes, std::vector<std::uint32_t>(nk_grid));
  for (std::size_t a = 0; a < axes; ++a) {
    for (std::size_t i = 0; i < nq_grid; ++i)
      qcoord[a][i] = static_cast<std::uint32_t>((i / qs[a]) % index.q_extents[a]);
    for (std::size_t j = 0; j < nk_grid; ++j)
      kcoord[a][j] = static_cast<std::uint32_t>((j / ks[a]) % index.kv_extents[a]);
  }
  auto visit = [&](auto&& fn) {
    for (std::size_t a = 0; a < axes; ++a) {
      const std::size_t ka = index.kv_extents[a];
      const auto& lut = index.lookup[a];
      for (std::size_t i = 0; i < nq_grid; ++i) {
        const std::uint32_t* row_lut = lut.data() + qcoord[a][i] * ka;
        for (std::size_t j = 0; j < nk_grid; ++j) {
          fn(a, (i + offset) * nk + (j + offset), (i + offset) * index.rows[a] + row_lut[kcoord[a][j]]);
        }
      }
    }
  };
  std::vector<T> out(nq * nk, T(0));
  visit([&](std::size_t a, std::size_t dst, std::size_t src) { out[dst] += qr[a][src]; });
  return detail::make_result<T>(Shape{nq, nk}, std::move(out), "rel_pos_bias",
                                std::span<const Tensor<T>>(qr), [&] {
    return [index, qcoord = std::move(qcoord), kcoord = std::move(kcoord), offset, nk,
            nq_grid, nk_grid, axes](Node<T>& self) {
      for (std::size_t a = 0; a < axes; ++a) {
        auto* p = detail::grad_target(self, a);
        if (!p) continue;
        auto& g = p->grad_buffer();
        const std::size_t ka = index.kv_extents[a];
        const auto& lut = index.lookup[a];
        for (std::size_t i = 0; i < nq_grid; ++i) {
          const std::uint32_t* row_lut = lut.data() + qcoord[a][i] * ka;
          const T* gi = self.grad.data() + (i + offset) * nk + offset;
          T* gq = g.data() + (i + offset) * index.rows[a];
          for (std::size_t j = 0; j < nk_grid; ++j) gq[row_lut[kcoord[a][j]]] += gi[j];
        }
      }
    };
  });
}

}  // namespace mmbt
