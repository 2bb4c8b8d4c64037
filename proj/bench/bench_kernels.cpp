// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Serial reference vs OpenMP kernels. Run with --benchmark_filter to narrow.

#include <benchmark/benchmark.h>

#include <random>

#include "faar/kernels.hpp"
#include "faar/oracle.hpp"

namespace faar {
namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix m(r, c);
  for (double& v : m.data) v = nd(rng);
  return m;
}

using GemmFn = Matrix (*)(const Matrix&, const Matrix&);

template <GemmFn F>
void BM_GemmNt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(F(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <GemmFn F>
void BM_GemmTn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 3), b = random_matrix(n, n, 4);
  for (auto _ : state) benchmark::DoNotOptimize(F(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <GemmFn F>
void BM_GemmNn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 5), b = random_matrix(n, n, 6);
  for (auto _ : state) benchmark::DoNotOptimize(F(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

using EncodeFn = void (*)(std::span<const double>, const nvfp4::ScaleSet&, std::span<nvfp4::Code>);

template <EncodeFn F>
void BM_RtnEncode(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix w = random_matrix(1, n, 7);
  const auto scales = nvfp4::compute_scales(w.data);
  std::vector<nvfp4::Code> out(n);
  for (auto _ : state) {
    F(w.data, scales, out);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

void BM_BruteForce(benchmark::State& state, Execution exec) {
  // 3x4 layer: up to 12 free weights, 4096 assignments.
  LinearLayer layer{"b", random_matrix(3, 4, 8)};
  const CalibBatch batch = CalibBatch::from_inputs(random_matrix(128, 4, 9));
  const auto scales = nvfp4::compute_scales(layer.weights.data);
  for (auto _ : state)
    benchmark::DoNotOptimize(brute_force_optimal(layer, std::span(&batch, 1), scales, 20, exec));
}

BENCHMARK(BM_GemmNt<kernels::serial::gemm_nt>)->Name("gemm_nt/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_GemmNt<kernels::parallel::gemm_nt>)->Name("gemm_nt/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_GemmTn<kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_GemmTn<kernels::parallel::gemm_tn>)->Name("gemm_tn/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_GemmNn<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_GemmNn<kernels::parallel::gemm_nn>)->Name("gemm_nn/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_RtnEncode<kernels::serial::rtn_encode>)->Name("rtn_encode/serial")->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK(BM_RtnEncode<kernels::parallel::rtn_encode>)->Name("rtn_encode/parallel")->Arg(1 << 12)->Arg(1 << 20);
BENCHMARK_CAPTURE(BM_BruteForce, serial, Execution::serial);
BENCHMARK_CAPTURE(BM_BruteForce, parallel, Execution::parallel);

}  // namespace
}  // namespace faar

BENCHMARK_MAIN();
