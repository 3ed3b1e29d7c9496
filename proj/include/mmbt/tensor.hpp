// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared graph Node. Every op records its
// inputs as parents and a closure that pushes the output gradient back into
// them. backward() orders the graph reachable from a scalar loss into a
// ComputationTape (inputs before outputs) and walks it in reverse.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mmbt {

using Shape = std::vector<std::size_t>;

/// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A schedule, config or geometry is internally inconsistent.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied data (empty waveform, label out of range, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse, e.g. backward() on a non-scalar.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::string op = "leaf";

  bool is_leaf() const { return parents.empty(); }

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (shape.empty()) shape = {1};
    for (auto extent : shape) {
      if (extent == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             shape_string(shape));
      }
    }
    if (numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_string(shape) + " holds " +
                           std::to_string(numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }
  /// Row-major 2-D literal, mostly for tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false) {
    std::vector<T> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (optimizer, tests).
  std::span<T> mutable_values() { return node_->value; }

  T item() const {
    if (size() != 1) {
      throw UsageError("item() on tensor of shape " + shape_string(shape()));
    }
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t row, std::size_t col) const {
    return node_->value[row * node_->shape.back() + col];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool is_leaf() const { return node_->is_leaf(); }
  const std::string& op() const { return node_->op; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// A new leaf holding a copy of the values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }
  Tensor clone(bool requires_grad) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::span<const Tensor<T>> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>& t) { return t.requires_grad(); });
}

/// Wraps an op result. When any input needs a gradient the inputs become
/// parents and `make_backward()` supplies the gradient rule; otherwise the
/// result is a constant and the closure is never built.
template <typename T, typename MakeBackward>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::string_view op,
                      std::span<const Tensor<T>> inputs,
                      MakeBackward&& make_backward) {
  Tensor<T> out(std::move(shape), std::move(values), false);
  if (any_requires_grad<T>(inputs)) {
    auto* node = out.node();
    node->requires_grad = true;
    node->op = std::string(op);
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = make_backward();
  } else {
    out.node()->op = std::string(op);
  }
  return out;
}

template <typename T, typename MakeBackward>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::string_view op,
                      std::initializer_list<Tensor<T>> inputs,
                      MakeBackward&& make_backward) {
  return make_result<T>(std::move(shape), std::move(values), op,
                        std::span<const Tensor<T>>(inputs.begin(), inputs.size()),
                        std::forward<MakeBackward>(make_backward));
}

}  // namespace detail

/// Topologically ordered record of the graph reachable from a root.
template <typename T>
class ComputationTape {
 public:
  static ComputationTape record(const Tensor<T>& root) {
    ComputationTape tape;
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS: a node is emitted after all its parents.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* parent = node->parents[next++].get();
        if (seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::span<Node<T>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

  bool is_topological() const {
    std::unordered_set<const Node<T>*> done;
    for (const auto* node : order_) {
      for (const auto& p : node->parents) {
        if (!done.count(p.get())) return false;
      }
      if (!done.insert(node).second) return false;
    }
    return true;
  }

 private:
  std::vector<Node<T>*> order_;
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf.
/// Leaf gradients add up across calls until zero_grad(); intermediate
/// gradients are reset on every call.
template <typename T>
ComputationTape<T> backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     shape_string(loss.shape()));
  }
  auto tape = ComputationTape<T>::record(loss);
  for (auto* node : tape.nodes()) {
    if (!node->is_leaf()) node->grad.clear();
  }
  if (!loss.requires_grad()) return tape;
  loss.node()->grad_buffer()[0] += T(1);
  auto nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.size() == node->value.size()) {
      node->backward(*node);
    }
  }
  return tape;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](T v) { return std::isfinite(v); });
}

}  // namespace mmbt
