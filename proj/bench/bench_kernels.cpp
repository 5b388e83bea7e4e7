// Serial reference vs parallel kernels at the sizes the desk-scale model uses
// (N=60 directions x 16 patches = 960 tokens, D=64).

#include <benchmark/benchmark.h>

#include <cstddef>
#include <random>
#include <vector>

#include "qsr/kernels.hpp"
#include "qsr/metrics.hpp"
#include "qsr/phantom.hpp"

namespace {

using namespace qsr;

std::vector<float> random_buffer(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const kernels::GemmShape s{static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                             static_cast<std::size_t>(state.range(2))};
  const auto a = random_buffer(s.m * s.k, 1);
  const auto b = random_buffer(s.k * s.n, 2);
  std::vector<float> c(s.m * s.n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::parallel::gemm(s, 1.0f, a.data(), b.data(), 0.0f, c.data());
    } else {
      kernels::serial::gemm(s, 1.0f, a.data(), b.data(), 0.0f, c.data());
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * s.m * s.n * s.k));
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const std::size_t rows = state.range(0), cols = state.range(1);
  const auto x = random_buffer(rows * cols, 3);
  std::vector<float> y(rows * cols);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::parallel::softmax_forward(rows, cols, x.data(), y.data());
    } else {
      kernels::serial::softmax_forward(rows, cols, x.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(rows * cols));
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const std::size_t rows = state.range(0), cols = state.range(1);
  const auto x = random_buffer(rows * cols, 4);
  std::vector<float> y(rows * cols), rstd(rows);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::parallel::layer_norm_forward(rows, cols, 1e-6f, x.data(), y.data(), rstd.data());
    } else {
      kernels::serial::layer_norm_forward(rows, cols, 1e-6f, x.data(), y.data(), rstd.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(rows * cols));
}

template <bool Parallel>
void BM_Gelu(benchmark::State& state) {
  const std::size_t n = state.range(0);
  const auto x = random_buffer(n, 5);
  std::vector<float> y(n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::parallel::gelu_forward(n, x.data(), y.data());
    } else {
      kernels::serial::gelu_forward(n, x.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n));
}

template <bool Parallel>
void BM_SimulateSlice(benchmark::State& state) {
  const auto table = phantom::make_shell(60, 1000.0, 1);
  phantom::SliceSpec spec;
  const auto models = phantom::generate_slice_models(spec, 7);
  const auto exec = Parallel ? phantom::Exec::kParallel : phantom::Exec::kSerial;
  for (auto _ : state) {
    auto v = phantom::simulate_multitensor(models, spec.height, spec.width, table, exec);
    benchmark::DoNotOptimize(v.data.data());
  }
}

template <bool Parallel>
void BM_FitDti(benchmark::State& state) {
  const auto table = phantom::make_shell(60, 1000.0, 1);
  phantom::SliceSpec spec;
  const auto v = phantom::simulate_multitensor(phantom::generate_slice_models(spec, 7), spec.height, spec.width, table);
  const auto exec = Parallel ? metrics::Exec::kParallel : metrics::Exec::kSerial;
  for (auto _ : state) {
    auto f = metrics::fit_dti(v, exec);
    benchmark::DoNotOptimize(f.tensors.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Args({960, 64, 64})->Args({960, 192, 64})->Args({960, 960, 16});
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Args({960, 64, 64})->Args({960, 192, 64})->Args({960, 960, 16});
BENCHMARK(BM_Softmax<false>)->Name("softmax/serial")->Args({3840, 960});
BENCHMARK(BM_Softmax<true>)->Name("softmax/parallel")->Args({3840, 960});
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/serial")->Args({1920, 64});
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/parallel")->Args({1920, 64});
BENCHMARK(BM_Gelu<false>)->Name("gelu/serial")->Arg(1920 * 256);
BENCHMARK(BM_Gelu<true>)->Name("gelu/parallel")->Arg(1920 * 256);
BENCHMARK(BM_SimulateSlice<false>)->Name("simulate_slice/serial");
BENCHMARK(BM_SimulateSlice<true>)->Name("simulate_slice/parallel");
BENCHMARK(BM_FitDti<false>)->Name("fit_dti/serial");
BENCHMARK(BM_FitDti<true>)->Name("fit_dti/parallel");

BENCHMARK_MAIN();
