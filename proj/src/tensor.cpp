#include "qsr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "qsr/error.hpp"

namespace qsr::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
std::shared_ptr<Node<T>> make_leaf(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw InvalidArgument("tensor shape " + to_string(shape) + " does not match " + std::to_string(values.size()) +
                          " values");
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

// Reverse topological order restricted to nodes that require grad.
template <typename T>
std::vector<Node<T>*> reverse_topo(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), false));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  return Tensor(make_leaf(std::move(shape), std::move(values), true));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<T>(n, value), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(make_leaf(Shape{}, std::vector<T>{value}, requires_grad));
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw InvalidArgument("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return constant(shape(), node_->value);
}

template <typename T>
std::span<const T> GradientMap<T>::of(const Tensor<T>& leaf) const {
  auto it = grads_.find(leaf.node());
  if (it == grads_.end()) throw InvalidArgument("tensor is not a requires-grad leaf of this graph");
  return it->second;
}

template <typename T>
GradientMap<T> backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw InvalidArgument("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  GradientMap<T> out;
  Node<T>* root = loss.node();
  if (!root->requires_grad) return out;

  const auto order = reverse_topo(root);
  for (Node<T>* n : order) n->grad.assign(n->value.size(), T(0));
  root->grad[0] = T(1);
  for (Node<T>* n : order) {
    if (n->backward) n->backward(*n);
  }
  for (Node<T>* n : order) {
    if (n->inputs.empty()) out.insert(n, n->grad);
  }
  return out;
}

template <typename T>
FiniteDiffReport finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x, T eps,
                                   double abs_floor) {
  const std::vector<T> base(x.data().begin(), x.data().end());
  auto leaf = Tensor<T>::parameter(x.shape(), base);
  const auto grads = backward(f(leaf));
  const auto analytic = grads.contains(leaf) ? std::vector<T>(grads.of(leaf).begin(), grads.of(leaf).end())
                                             : std::vector<T>(base.size(), T(0));

  FiniteDiffReport report;
  std::vector<T> probe = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    probe[i] = base[i] + eps;
    const double up = f(Tensor<T>::constant(x.shape(), probe)).item();
    probe[i] = base[i] - eps;
    const double down = f(Tensor<T>::constant(x.shape(), probe)).item();
    probe[i] = base[i];
    const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
    const double a = analytic[i];
    const double abs_err = std::abs(a - numeric);
    const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    if (i == 0 || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic = a;
      report.numeric = numeric;
    }
  }
  return report;
}

template class Tensor<float>;
template class Tensor<double>;
template class GradientMap<float>;
template class GradientMap<double>;
template GradientMap<float> backward(const Tensor<float>&);
template GradientMap<double> backward(const Tensor<double>&);
template FiniteDiffReport finite_diff_check(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                            const Tensor<float>&, float, double);
template FiniteDiffReport finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                            const Tensor<double>&, double, double);

}  // namespace qsr::ad
