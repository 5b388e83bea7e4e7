#pragma once

// Differentiable primitives. Shape rules are strict: elementwise binary ops
// accept equal shapes or a right operand whose shape is a suffix of the left
// operand's shape (broadcast over leading batch dimensions only). Anything
// else needs an explicit `expand`.

#include <cstddef>
#include <vector>

#include "qsr/tensor.hpp"

namespace qsr::ad {

/// a: [..., M, K]. b: [K, N] shared across the leading dims of `a`, or
/// [..., K, N] with the same leading dims (batched). With transpose_b the
/// last two dims of b are read as [N, K].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// General axis permutation: out.shape[i] = a.shape[perm[i]].
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<std::size_t>& perm);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, std::size_t axis, const std::vector<std::size_t>& sizes);
/// Repeats a size-1 axis `count` times.
template <typename T>
Tensor<T> expand(const Tensor<T>& a, std::size_t axis, std::size_t count);

/// Full reductions to a scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

/// Normalizes the last axis to zero mean / unit variance. No affine terms.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-6));
/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a);
/// tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
/// mean((a - b)^2) as a scalar.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace qsr::ad
