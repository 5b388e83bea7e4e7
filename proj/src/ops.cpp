#include "qsr/ops.hpp"

#include <algorithm>
#include <numeric>

#include "qsr/error.hpp"
#include "qsr/kernels.hpp"

namespace qsr::ad {
namespace {

namespace kp = kernels::parallel;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value, std::vector<NodePtr<T>> inputs,
                      std::function<void(Node<T>&)> rule) {
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward = std::move(rule);
  }
  return Tensor<T>(std::move(node));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw InvalidArgument(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

template <typename T>
void check_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!is_suffix(a.shape(), b.shape())) shape_error(op, a.shape(), b.shape());
}

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const char* name, Binary kind, const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(name, a, b);
  const std::size_t n = a.size();
  const std::size_t bn = b.size();
  const T* av = a.data().data();
  const T* bv = b.data().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T y = bv[i % bn];
    out[i] = kind == Binary::kAdd ? av[i] + y : kind == Binary::kSub ? av[i] - y : av[i] * y;
  }
  return make_result<T>(name, a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()}, [kind, n, bn](Node<T>& self) {
    Node<T>& lhs = *self.inputs[0];
    Node<T>& rhs = *self.inputs[1];
    const T* g = self.grad.data();
    if (lhs.requires_grad) {
      if (kind == Binary::kMul) {
        for (std::size_t i = 0; i < n; ++i) lhs.grad[i] += g[i] * rhs.value[i % bn];
      } else {
        for (std::size_t i = 0; i < n; ++i) lhs.grad[i] += g[i];
      }
    }
    if (rhs.requires_grad) {
      if (kind == Binary::kMul) {
        for (std::size_t i = 0; i < n; ++i) rhs.grad[i % bn] += g[i] * lhs.value[i];
      } else {
        const T sign = kind == Binary::kAdd ? T(1) : T(-1);
        for (std::size_t i = 0; i < n; ++i) rhs.grad[i % bn] += sign * g[i];
      }
    }
  });
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// For every output offset, the offset of the same element in the input.
std::vector<std::size_t> permutation_map(const Shape& in_shape, const std::vector<std::size_t>& perm) {
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
  const std::size_t n = numel(in_shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(perm.size(), 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < perm.size(); ++d) src += idx[d] * in_strides[perm[d]];
    map[o] = src;
    for (std::size_t d = perm.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", a.shape(), b.shape());
  const std::size_t k = a.shape().back();
  const std::size_t bk = transpose_b ? b.shape().back() : b.shape()[b.rank() - 2];
  const std::size_t n = transpose_b ? b.shape()[b.rank() - 2] : b.shape().back();
  if (bk != k) shape_error("matmul", a.shape(), b.shape());

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  if (b.rank() == 2) {
    const std::size_t rows = a.size() / k;
    std::vector<T> out(rows * n);
    const kernels::GemmShape fwd{rows, n, k, false, transpose_b};
    kp::gemm(fwd, T(1), a.data().data(), b.data().data(), T(0), out.data());
    return make_result<T>("matmul", std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                          [rows, n, k, transpose_b](Node<T>& self) {
                            Node<T>& lhs = *self.inputs[0];
                            Node<T>& rhs = *self.inputs[1];
                            if (lhs.requires_grad) {
                              // dA[rows,k] += dC[rows,n] * op(B)^T
                              kp::gemm(kernels::GemmShape{rows, k, n, false, !transpose_b}, T(1), self.grad.data(),
                                       rhs.value.data(), T(1), lhs.grad.data());
                            }
                            if (rhs.requires_grad) {
                              if (transpose_b) {
                                // dB[n,k] += dC^T * A
                                kp::gemm(kernels::GemmShape{n, k, rows, true, false}, T(1), self.grad.data(),
                                         lhs.value.data(), T(1), rhs.grad.data());
                              } else {
                                // dB[k,n] += A^T * dC
                                kp::gemm(kernels::GemmShape{k, n, rows, true, false}, T(1), lhs.value.data(),
                                         self.grad.data(), T(1), rhs.grad.data());
                              }
                            }
                          });
  }

  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t batch = a.size() / (m * k);
  std::vector<T> out(batch * m * n);
  kp::gemm_batched(batch, kernels::GemmShape{m, n, k, false, transpose_b}, T(1), a.data().data(), b.data().data(),
                   T(0), out.data());
  return make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
      [batch, m, n, k, transpose_b](Node<T>& self) {
        Node<T>& lhs = *self.inputs[0];
        Node<T>& rhs = *self.inputs[1];
        if (lhs.requires_grad) {
          kp::gemm_batched(batch, kernels::GemmShape{m, k, n, false, !transpose_b}, T(1), self.grad.data(),
                           rhs.value.data(), T(1), lhs.grad.data());
        }
        if (rhs.requires_grad) {
          if (transpose_b) {
            kp::gemm_batched(batch, kernels::GemmShape{n, k, m, true, false}, T(1), self.grad.data(),
                             lhs.value.data(), T(1), rhs.grad.data());
          } else {
            kp::gemm_batched(batch, kernels::GemmShape{k, n, m, true, false}, T(1), lhs.value.data(),
                             self.grad.data(), T(1), rhs.grad.data());
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", Binary::kAdd, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", Binary::kSub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("mul", Binary::kMul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a.node_ptr()}, [factor](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += offset;
  return make_result<T>("add_scalar", a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> check(perm);
  std::sort(check.begin(), check.end());
  for (std::size_t i = 0; i < check.size(); ++i) {
    if (check.size() != a.rank() || check[i] != i) {
      throw InvalidArgument("transpose: permutation does not match rank of " + to_string(a.shape()));
    }
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.shape()[perm[i]];
  auto map = std::make_shared<const std::vector<std::size_t>>(permutation_map(a.shape(), perm));
  std::vector<T> out(a.size());
  const T* src = a.data().data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = src[(*map)[o]];
  return make_result<T>("transpose", std::move(out_shape), std::move(out), {a.node_ptr()}, [map](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    for (std::size_t o = 0; o < self.grad.size(); ++o) in.grad[(*map)[o]] += self.grad[o];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw InvalidArgument("concat: axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) shape_error("concat", first, probe);
    probe[axis] = first[axis];
    if (probe != first) shape_error("concat", first, p.shape());
    out_shape[axis] += p.shape()[axis];
    widths.push_back(p.shape()[axis]);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t total = out_shape[axis];

  std::vector<T> out(numel(out_shape));
  std::vector<NodePtr<T>> inputs;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].data().data();
    const std::size_t w = widths[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * w, w, out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    }
    offset += widths[p];
    inputs.push_back(parts[p].node_ptr());
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), std::move(inputs),
                        [widths, outer, inner, total](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t p = 0; p < widths.size(); ++p) {
                            Node<T>& in = *self.inputs[p];
                            const std::size_t w = widths[p] * inner;
                            if (in.requires_grad) {
                              for (std::size_t o = 0; o < outer; ++o) {
                                const T* g = self.grad.data() + (o * total + off) * inner;
                                T* dst = in.grad.data() + o * w;
                                for (std::size_t j = 0; j < w; ++j) dst[j] += g[j];
                              }
                            }
                            off += widths[p];
                          }
                        });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
  if (axis >= a.rank()) throw InvalidArgument("split: axis out of range for " + to_string(a.shape()));
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != a.shape()[axis]) {
    throw InvalidArgument("split: sizes do not sum to axis length of " + to_string(a.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  const std::size_t total = a.shape()[axis];

  std::vector<Tensor<T>> parts;
  std::size_t offset = 0;
  for (std::size_t width : sizes) {
    Shape shape = a.shape();
    shape[axis] = width;
    const std::size_t w = width * inner;
    std::vector<T> out(outer * w);
    const T* src = a.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + (o * total + offset) * inner, w, out.begin() + static_cast<std::ptrdiff_t>(o * w));
    }
    parts.push_back(make_result<T>("split", std::move(shape), std::move(out), {a.node_ptr()},
                                   [outer, inner, total, offset, w](Node<T>& self) {
                                     Node<T>& in = *self.inputs[0];
                                     for (std::size_t o = 0; o < outer; ++o) {
                                       T* dst = in.grad.data() + (o * total + offset) * inner;
                                       const T* g = self.grad.data() + o * w;
                                       for (std::size_t j = 0; j < w; ++j) dst[j] += g[j];
                                     }
                                   }));
    offset += width;
  }
  return parts;
}

template <typename T>
Tensor<T> expand(const Tensor<T>& a, std::size_t axis, std::size_t count) {
  if (axis >= a.rank() || a.shape()[axis] != 1) {
    throw InvalidArgument("expand: axis " + std::to_string(axis) + " of " + to_string(a.shape()) + " is not size 1");
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
  Shape shape = a.shape();
  shape[axis] = count;
  std::vector<T> out(outer * count * inner);
  const T* src = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < count; ++c) {
      std::copy_n(src + o * inner, inner, out.begin() + static_cast<std::ptrdiff_t>((o * count + c) * inner));
    }
  }
  return make_result<T>("expand", std::move(shape), std::move(out), {a.node_ptr()},
                        [outer, inner, count](Node<T>& self) {
                          Node<T>& in = *self.inputs[0];
                          for (std::size_t o = 0; o < outer; ++o) {
                            T* dst = in.grad.data() + o * inner;
                            for (std::size_t c = 0; c < count; ++c) {
                              const T* g = self.grad.data() + (o * count + c) * inner;
                              for (std::size_t j = 0; j < inner; ++j) dst[j] += g[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return make_result<T>("sum", Shape{}, std::vector<T>{total}, {a.node_ptr()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    const T g = self.grad[0];
    for (auto& v : in.grad) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw InvalidArgument("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps) {
  if (a.rank() == 0) throw InvalidArgument("layer_norm needs rank >= 1");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  std::vector<T> out(a.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  kp::layer_norm_forward(rows, cols, eps, a.data().data(), out.data(), rstd->data());
  return make_result<T>("layer_norm", a.shape(), std::move(out), {a.node_ptr()}, [rows, cols, rstd](Node<T>& self) {
    kp::layer_norm_backward(rows, cols, self.value.data(), rstd->data(), self.grad.data(),
                            self.inputs[0]->grad.data());
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.rank() == 0) throw InvalidArgument("softmax needs rank >= 1");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  std::vector<T> out(a.size());
  kp::softmax_forward(rows, cols, a.data().data(), out.data());
  return make_result<T>("softmax", a.shape(), std::move(out), {a.node_ptr()}, [rows, cols](Node<T>& self) {
    kp::softmax_backward(rows, cols, self.value.data(), self.grad.data(), self.inputs[0]->grad.data());
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  kp::gelu_forward(a.size(), a.data().data(), out.data());
  return make_result<T>("gelu", a.shape(), std::move(out), {a.node_ptr()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    kp::gelu_backward(in.value.size(), in.value.data(), self.grad.data(), in.grad.data());
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
  if (a.size() == 0) throw InvalidArgument("mse of empty tensors");
  const std::size_t n = a.size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.data()[i] - b.data()[i];
    total += d * d;
  }
  return make_result<T>("mse", Shape{}, std::vector<T>{total / static_cast<T>(n)}, {a.node_ptr(), b.node_ptr()},
                        [n](Node<T>& self) {
                          Node<T>& lhs = *self.inputs[0];
                          Node<T>& rhs = *self.inputs[1];
                          const T g = self.grad[0] * T(2) / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                            const T d = g * (lhs.value[i] - rhs.value[i]);
                            if (lhs.requires_grad) lhs.grad[i] += d;
                            if (rhs.requires_grad) rhs.grad[i] -= d;
                          }
                        });
}

#define QSR_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                             \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> transpose(const Tensor<T>&, const std::vector<std::size_t>&);                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                          \
  template std::vector<Tensor<T>> split(const Tensor<T>&, std::size_t, const std::vector<std::size_t>&); \
  template Tensor<T> expand(const Tensor<T>&, std::size_t, std::size_t);                          \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, T);                                             \
  template Tensor<T> softmax(const Tensor<T>&);                                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);

QSR_INSTANTIATE_OPS(float)
QSR_INSTANTIATE_OPS(double)

#undef QSR_INSTANTIATE_OPS

}  // namespace qsr::ad
