#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qid/numerics/errors.hpp"

namespace qid {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Floating-point operation counter. Every op adds its arithmetic cost to
/// the calling thread's counter; tests read deltas around a region.
class FlopCounter {
 public:
  static std::uint64_t& value() {
    thread_local std::uint64_t count = 0;
    return count;
  }
  static void add(std::uint64_t n) { value() += n; }
  static std::uint64_t read() { return value(); }
  // flops spent inside fn
  template <class F>
  static std::uint64_t measure(F&& fn) {
    const auto before = value();
    fn();
    return value() - before;
  }
};

template <std::floating_point S>
class Tape;

namespace detail {

template <std::floating_point S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S{0});
  }
};

template <std::floating_point S>
Tape<S>*& active_tape() {
  thread_local Tape<S>* tape = nullptr;
  return tape;
}

}  // namespace detail

/// Dense row-major array with an optional gradient. Copies share storage;
/// ops never write into their inputs, so shared values stay immutable once
/// produced. Parameters are the exception: the optimizer updates leaves in
/// place between steps.
template <std::floating_point S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S{0}) : node_(std::make_shared<detail::Node<S>>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
    }
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<S> values) : node_(std::make_shared<detail::Node<S>>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(S v) { return Tensor(Shape{1}, std::vector<S>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<S> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? node_->shape[1] : node_->shape[0]; }

  std::span<const S> data() const { return node_->value; }
  // Only for leaves: initialization, loading and optimizer updates.
  std::span<S> mutable_data() { return node_->value; }

  S item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return node_->value[0];
  }
  S operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  S operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy detached from any graph; keeps the requires_grad flag.
  Tensor clone() const {
    Tensor out(shape(), std::vector<S>(node_->value));
    out.node_->requires_grad = node_->requires_grad;
    return out;
  }

  template <std::floating_point T>
  Tensor<T> cast() const {
    std::vector<T> values(node_->value.begin(), node_->value.end());
    Tensor<T> out(shape(), std::move(values));
    out.set_requires_grad(requires_grad());
    return out;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: used by ops and the tape.
  const std::shared_ptr<detail::Node<S>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<S>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node<S>> node_;
};

/// Ordered record of differentiable operations. Nodes are appended as ops
/// run, which is already a topological order; backward walks it in reverse.
/// Recording is active only inside a Tape::Scope.
template <std::floating_point S>
class Tape {
 public:
  class Scope {
   public:
    explicit Scope(Tape* tape) : previous_(detail::active_tape<S>()) { detail::active_tape<S>() = tape; }
    ~Scope() { detail::active_tape<S>() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Scope record() { return Scope(this); }
  // Stops recording until the returned scope ends.
  static Scope suspend() { return Scope(nullptr); }

  void push(std::shared_ptr<detail::Node<S>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool contains(const Tensor<S>& t) const {
    return std::any_of(nodes_.begin(), nodes_.end(), [&](const auto& n) { return n == t.node(); });
  }
  const std::vector<std::shared_ptr<detail::Node<S>>>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::shared_ptr<detail::Node<S>>> nodes_;
};

template <std::floating_point S>
Tape<S>* active_tape() {
  return detail::active_tape<S>();
}

/// Reverse pass. Seeds d(loss)/d(loss) = 1 and visits each recorded node
/// once, newest first; parents accumulate by summation.
template <std::floating_point S>
void backward(const Tensor<S>& loss, Tape<S>& tape) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any parameter that requires grad");
  }
  const auto& nodes = tape.nodes();
  auto root = loss.node();
  auto it = std::find(nodes.rbegin(), nodes.rend(), root);
  if (it == nodes.rend()) throw ContractError("backward: loss was not recorded on this tape");
  root->ensure_grad();
  root->grad[0] += S{1};
  for (; it != nodes.rend(); ++it) {
    auto& node = **it;
    if (node.grad.empty() || !node.backward_fn) continue;
    node.backward_fn(node);
  }
}

namespace detail {

template <std::floating_point S>
void check_finite(const std::vector<S>& values, const char* op) {
  for (S v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + ": non-finite value produced");
  }
}

/// Builds the output node. The backward closure is attached only when a tape
/// is recording and some parent needs a gradient.
template <std::floating_point S>
Tensor<S> make_result(const char* op, Shape shape, std::vector<S> value,
                      std::vector<std::shared_ptr<Node<S>>> parents, std::function<void(Node<S>&)> backward_fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape<S>* tape = active_tape<S>();
  const bool any_grad =
      std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (tape && any_grad) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
    tape->push(node);
  }
  return Tensor<S>(std::move(node));
}

}  // namespace detail

}  // namespace qid
