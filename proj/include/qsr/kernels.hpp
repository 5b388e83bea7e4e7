#pragma once

// Dense numeric kernels behind the autodiff primitives.
//
// Every kernel exists twice: `serial::` is a plain loop nest kept as the
// reference for tests, `parallel::` is the production path (OpenMP over
// independent rows or batch items, Eigen for GEMM blocks). Parallel kernels
// never reduce across threads, so results are independent of the thread count.

#include <cstddef>
#include <span>

namespace qsr::kernels {

/// Row-major GEMM description: C[M,N] = alpha * op(A) * op(B) + beta * C.
/// op(A) is M x K, op(B) is K x N. A stored as [M,K] (or [K,M] when
/// trans_a), B stored as [K,N] (or [N,K] when trans_b).
struct GemmShape {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  bool trans_a = false;
  bool trans_b = false;
};

namespace serial {

template <typename T>
void gemm(const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c);

template <typename T>
void gemm_batched(std::size_t batch, const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c);

template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t cols, T eps, const T* x, T* y, T* rstd);

template <typename T>
void layer_norm_backward(std::size_t rows, std::size_t cols, const T* y, const T* rstd, const T* dy, T* dx);

template <typename T>
void softmax_forward(std::size_t rows, std::size_t cols, const T* x, T* y);

template <typename T>
void softmax_backward(std::size_t rows, std::size_t cols, const T* y, const T* dy, T* dx);

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y);

template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c);

template <typename T>
void gemm_batched(std::size_t batch, const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c);

template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t cols, T eps, const T* x, T* y, T* rstd);

template <typename T>
void layer_norm_backward(std::size_t rows, std::size_t cols, const T* y, const T* rstd, const T* dy, T* dx);

template <typename T>
void softmax_forward(std::size_t rows, std::size_t cols, const T* x, T* y);

template <typename T>
void softmax_backward(std::size_t rows, std::size_t cols, const T* y, const T* dy, T* dx);

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y);

template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);

}  // namespace parallel

/// Number of worker threads used by the parallel kernels (OpenMP max threads).
int thread_count();
void set_thread_count(int n);

}  // namespace qsr::kernels
