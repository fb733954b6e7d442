#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "brivl/errors.hpp"

namespace brivl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Dense row-major tensor of T (float for models, double for gradient checks).
// Copies share the underlying storage and graph node; use clone() or
// detach() for an independent value.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
  }

  static BasicTensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  const char* op() const { return node_->op; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  // Same values, fresh leaf with no history and no gradient.
  BasicTensor detach() const { return from(shape(), node_->value, false); }

  // Independent leaf copy that keeps the requires_grad flag.
  BasicTensor clone() const { return from(shape(), node_->value, requires_grad()); }

  // Reverse-mode sweep from a scalar. Gradients accumulate into every
  // reachable tensor that requires them.
  void backward() const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

namespace detail {

// Builds the result node of a primitive. The graph edge and backward rule
// are kept only when recording is on and some input requires a gradient.
template <typename T>
BasicTensor<T> make_result(const char* op, Shape shape, std::vector<T> values, std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward) {
  BasicTensor<T> out = BasicTensor<T>::from(std::move(shape), std::move(values));
  out.node().op = op;
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  auto& node = out.node();
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (auto& t : inputs) node.inputs.push_back(t.node_ptr());
  node.backward = std::move(backward);
  return out;
}

// Gradient buffer of input i, or nullptr when that input needs none.
template <typename T>
T* input_grad(Node<T>& node, std::size_t i) {
  Node<T>& in = *node.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.grad_buffer().data();
}

}  // namespace detail

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(shape()));
  if (!requires_grad()) throw InvalidArgument("backward: loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace brivl
