#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a handle to a graph node. Primitives in ops.hpp create new
// nodes that record their inputs and a backward rule; `backward` walks the
// recorded graph in reverse topological order. Precision is the template
// parameter (float for training, double for gradient checks).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace qsr::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Leaf that never receives gradients.
  static Tensor constant(Shape shape, std::vector<T> values);
  /// Leaf that receives gradients.
  static Tensor parameter(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  /// Only meaningful on leaves: toggles whether later graphs track this tensor.
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  const char* op() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }
  /// Mutable access to the stored values. Intended for leaves (parameter
  /// updates, input staging); mutating an interior node invalidates its graph.
  std::span<T> mutable_data() { return node_->value; }
  /// Gradient from the most recent `backward` that reached this tensor.
  std::span<const T> grad() const { return node_->grad; }

  T item() const;
  /// Constant copy of the current values, cut from the graph.
  Tensor detach() const;

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Gradients of a scalar loss with respect to every requires-grad leaf in its graph.
template <typename T>
class GradientMap {
 public:
  bool contains(const Tensor<T>& leaf) const { return grads_.count(leaf.node()) != 0; }
  std::span<const T> of(const Tensor<T>& leaf) const;
  std::size_t size() const noexcept { return grads_.size(); }

  void insert(const Node<T>* node, std::vector<T> grad) { grads_[node] = std::move(grad); }

 private:
  std::unordered_map<const Node<T>*, std::vector<T>> grads_;
};

/// Reverse-mode sweep from a scalar loss. All gradients in the graph are
/// reset first, so calling this twice on the same graph yields the same map.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss);

/// Worst coordinate of a central-difference gradient comparison.
struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares backward() of `f` at `x` with central differences of step `eps`.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor).
template <typename T>
FiniteDiffReport finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                                   T eps, double abs_floor = 1e-6);

}  // namespace qsr::ad
