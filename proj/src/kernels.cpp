#include "qsr/kernels.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace qsr::kernels {
namespace {

template <typename T>
constexpr T kGeluScale = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluCubic = static_cast<T>(0.044715);

// Rows of C handled per parallel task. Fixed, so the Eigen blocking seen by
// each output row does not depend on how many threads run.
constexpr std::size_t kRowChunk = 64;

constexpr std::size_t kElemChunk = 4096;

inline std::int64_t as_index(std::size_t v) { return static_cast<std::int64_t>(v); }

template <typename T>
T gelu_value(T x) {
  const T u = kGeluScale<T> * (x + kGeluCubic<T> * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_slope(T x) {
  const T u = kGeluScale<T> * (x + kGeluCubic<T> * x * x * x);
  const T th = std::tanh(u);
  const T du = kGeluScale<T> * (T(1) + T(3) * kGeluCubic<T> * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
void layer_norm_row(std::size_t cols, T eps, const T* x, T* y, T* rstd) {
  T mean = 0;
  for (std::size_t j = 0; j < cols; ++j) mean += x[j];
  mean /= static_cast<T>(cols);
  T var = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    const T d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(cols);
  const T r = T(1) / std::sqrt(var + eps);
  for (std::size_t j = 0; j < cols; ++j) y[j] = (x[j] - mean) * r;
  *rstd = r;
}

template <typename T>
void layer_norm_row_backward(std::size_t cols, const T* y, T rstd, const T* dy, T* dx) {
  T mean_dy = 0;
  T mean_dy_y = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    mean_dy += dy[j];
    mean_dy_y += dy[j] * y[j];
  }
  mean_dy /= static_cast<T>(cols);
  mean_dy_y /= static_cast<T>(cols);
  for (std::size_t j = 0; j < cols; ++j) dx[j] += rstd * (dy[j] - mean_dy - y[j] * mean_dy_y);
}

template <typename T>
void softmax_row(std::size_t cols, const T* x, T* y) {
  T peak = x[0];
  for (std::size_t j = 1; j < cols; ++j) peak = std::max(peak, x[j]);
  T total = 0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - peak);
    total += y[j];
  }
  const T inv = T(1) / total;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

template <typename T>
void softmax_row_backward(std::size_t cols, const T* y, const T* dy, T* dx) {
  T dot = 0;
  for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C rows [r0, r0 + rn) of one GEMM through Eigen.
template <typename T>
void gemm_rows(const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c, std::size_t r0,
               std::size_t rn) {
  const auto m = as_index(s.m), n = as_index(s.n), k = as_index(s.k);
  Eigen::Map<RowMat<T>> cm(c, m, n);
  auto out = cm.middleRows(as_index(r0), as_index(rn));
  if (beta == T(0)) {
    out.setZero();
  } else if (beta != T(1)) {
    out *= beta;
  }
  Eigen::Map<const RowMat<T>> am(a, s.trans_a ? k : m, s.trans_a ? m : k);
  Eigen::Map<const RowMat<T>> bm(b, s.trans_b ? n : k, s.trans_b ? k : n);
  const auto r = as_index(r0), len = as_index(rn);
  if (!s.trans_a && !s.trans_b) {
    out.noalias() += alpha * am.middleRows(r, len) * bm;
  } else if (!s.trans_a && s.trans_b) {
    out.noalias() += alpha * am.middleRows(r, len) * bm.transpose();
  } else if (s.trans_a && !s.trans_b) {
    out.noalias() += alpha * am.middleCols(r, len).transpose() * bm;
  } else {
    out.noalias() += alpha * am.middleCols(r, len).transpose() * bm.transpose();
  }
}

}  // namespace

int thread_count() { return omp_get_max_threads(); }

void set_thread_count(int n) {
  if (n > 0) omp_set_num_threads(n);
}

namespace serial {

template <typename T>
void gemm(const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c) {
  for (std::size_t i = 0; i < s.m; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < s.k; ++p) {
        const T av = s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
        const T bv = s.trans_b ? b[j * s.k + p] : b[p * s.n + j];
        acc += av * bv;
      }
      T& out = c[i * s.n + j];
      out = (beta == T(0) ? T(0) : beta * out) + alpha * acc;
    }
  }
}

template <typename T>
void gemm_batched(std::size_t batch, const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c) {
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(s, alpha, a + i * s.m * s.k, b + i * s.k * s.n, beta, c + i * s.m * s.n);
  }
}

template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t cols, T eps, const T* x, T* y, T* rstd) {
  for (std::size_t i = 0; i < rows; ++i) layer_norm_row(cols, eps, x + i * cols, y + i * cols, rstd + i);
}

template <typename T>
void layer_norm_backward(std::size_t rows, std::size_t cols, const T* y, const T* rstd, const T* dy, T* dx) {
  for (std::size_t i = 0; i < rows; ++i) {
    layer_norm_row_backward(cols, y + i * cols, rstd[i], dy + i * cols, dx + i * cols);
  }
}

template <typename T>
void softmax_forward(std::size_t rows, std::size_t cols, const T* x, T* y) {
  for (std::size_t i = 0; i < rows; ++i) softmax_row(cols, x + i * cols, y + i * cols);
}

template <typename T>
void softmax_backward(std::size_t rows, std::size_t cols, const T* y, const T* dy, T* dx) {
  for (std::size_t i = 0; i < rows; ++i) softmax_row_backward(cols, y + i * cols, dy + i * cols, dx + i * cols);
}

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_value(x[i]);
}

template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_slope(x[i]);
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c) {
  const auto chunks = as_index((s.m + kRowChunk - 1) / kRowChunk);
#pragma omp parallel for schedule(static)
  for (std::int64_t ch = 0; ch < chunks; ++ch) {
    const std::size_t r0 = static_cast<std::size_t>(ch) * kRowChunk;
    gemm_rows(s, alpha, a, b, beta, c, r0, std::min(kRowChunk, s.m - r0));
  }
}

template <typename T>
void gemm_batched(std::size_t batch, const GemmShape& s, T alpha, const T* a, const T* b, T beta, T* c) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < as_index(batch); ++i) {
    const auto u = static_cast<std::size_t>(i);
    gemm_rows(s, alpha, a + u * s.m * s.k, b + u * s.k * s.n, beta, c + u * s.m * s.n, 0, s.m);
  }
}

template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t cols, T eps, const T* x, T* y, T* rstd) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < as_index(rows); ++i) {
    const auto u = static_cast<std::size_t>(i);
    layer_norm_row(cols, eps, x + u * cols, y + u * cols, rstd + u);
  }
}

template <typename T>
void layer_norm_backward(std::size_t rows, std::size_t cols, const T* y, const T* rstd, const T* dy, T* dx) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < as_index(rows); ++i) {
    const auto u = static_cast<std::size_t>(i);
    layer_norm_row_backward(cols, y + u * cols, rstd[u], dy + u * cols, dx + u * cols);
  }
}

// Eigen peels a scalar prefix off unaligned maps, and its scalar and packet
// exp/tanh differ in the last bits. Working on aligned temporaries makes the
// vector/scalar split depend only on the length, never on the address.

template <typename T>
void softmax_forward(std::size_t rows, std::size_t cols, const T* x, T* y) {
  using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
#pragma omp parallel
  {
    Row buf(as_index(cols));
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < as_index(rows); ++i) {
      const auto u = static_cast<std::size_t>(i);
      buf = Eigen::Map<const Row>(x + u * cols, as_index(cols));
      buf = (buf - buf.maxCoeff()).exp();
      Eigen::Map<Row>(y + u * cols, as_index(cols)) = buf / buf.sum();
    }
  }
}

template <typename T>
void softmax_backward(std::size_t rows, std::size_t cols, const T* y, const T* dy, T* dx) {
  using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
#pragma omp parallel
  {
    Row yr(as_index(cols)), dyr(as_index(cols));
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < as_index(rows); ++i) {
      const auto u = static_cast<std::size_t>(i);
      yr = Eigen::Map<const Row>(y + u * cols, as_index(cols));
      dyr = Eigen::Map<const Row>(dy + u * cols, as_index(cols));
      const T dot = (yr * dyr).sum();
      Eigen::Map<Row>(dx + u * cols, as_index(cols)) += yr * (dyr - dot);
    }
  }
}

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y) {
  using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto chunks = as_index((n + kElemChunk - 1) / kElemChunk);
#pragma omp parallel
  {
    Vec xv(as_index(kElemChunk));
#pragma omp for schedule(static)
    for (std::int64_t ch = 0; ch < chunks; ++ch) {
      const std::size_t o = static_cast<std::size_t>(ch) * kElemChunk, len = std::min(kElemChunk, n - o);
      auto xs = xv.head(as_index(len));
      xs = Eigen::Map<const Vec>(x + o, as_index(len));
      xs = T(0.5) * xs * (T(1) + (kGeluScale<T> * (xs + kGeluCubic<T> * xs.cube())).tanh());
      Eigen::Map<Vec>(y + o, as_index(len)) = xs;
    }
  }
}

template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx) {
  using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto chunks = as_index((n + kElemChunk - 1) / kElemChunk);
#pragma omp parallel
  {
    Vec xv(as_index(kElemChunk)), th(as_index(kElemChunk)), slope(as_index(kElemChunk));
#pragma omp for schedule(static)
    for (std::int64_t ch = 0; ch < chunks; ++ch) {
      const std::size_t o = static_cast<std::size_t>(ch) * kElemChunk, len = std::min(kElemChunk, n - o);
      const auto m = as_index(len);
      auto xs = xv.head(m);
      auto ts = th.head(m);
      auto ss = slope.head(m);
      xs = Eigen::Map<const Vec>(x + o, m);
      ts = (kGeluScale<T> * (xs + kGeluCubic<T> * xs.cube())).tanh();
      ss = T(0.5) * (T(1) + ts) +
           T(0.5) * xs * (T(1) - ts.square()) * (kGeluScale<T> * (T(1) + T(3) * kGeluCubic<T> * xs.square()));
      Eigen::Map<Vec>(dx + o, m) += Eigen::Map<const Vec>(dy + o, m) * ss;
    }
  }
}

}  // namespace parallel

#define QSR_INSTANTIATE_KERNELS(NS, T)                                                                   \
  template void NS::gemm<T>(const GemmShape&, T, const T*, const T*, T, T*);                           \
  template void NS::gemm_batched<T>(std::size_t, const GemmShape&, T, const T*, const T*, T, T*);      \
  template void NS::layer_norm_forward<T>(std::size_t, std::size_t, T, const T*, T*, T*);              \
  template void NS::layer_norm_backward<T>(std::size_t, std::size_t, const T*, const T*, const T*, T*); \
  template void NS::softmax_forward<T>(std::size_t, std::size_t, const T*, T*);                        \
  template void NS::softmax_backward<T>(std::size_t, std::size_t, const T*, const T*, T*);             \
  template void NS::gelu_forward<T>(std::size_t, const T*, T*);                                        \
  template void NS::gelu_backward<T>(std::size_t, const T*, const T*, T*);

QSR_INSTANTIATE_KERNELS(serial, float)
QSR_INSTANTIATE_KERNELS(serial, double)
QSR_INSTANTIATE_KERNELS(parallel, float)
QSR_INSTANTIATE_KERNELS(parallel, double)

#undef QSR_INSTANTIATE_KERNELS

}  // namespace qsr::kernels
