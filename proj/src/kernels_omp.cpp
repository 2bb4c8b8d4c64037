// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Parallelism is over output rows only; every output element is reduced by a
// single thread in the same order as the serial kernels.

#include <cstdint>
#include <stdexcept>

#include "faar/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace faar::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::size_t kMinParallelWork = 1 << 14;
}  // namespace

Matrix gemm_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw std::invalid_argument("gemm_nt: inner dimensions differ");
  Matrix c(a.rows, b.rows);
  const auto rows = static_cast<std::int64_t>(a.rows);
  const bool big = a.rows * b.rows * a.cols >= kMinParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* ar = a.data.data() + i * a.cols;
    double* cr = c.data.data() + i * c.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* br = b.data.data() + j * b.cols;
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      cr[j] = acc;
    }
  }
  return c;
}

Matrix gemm_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw std::invalid_argument("gemm_tn: inner dimensions differ");
  Matrix c(a.cols, b.cols);
  const auto rows = static_cast<std::int64_t>(a.cols);
  const bool big = a.rows * a.cols * b.cols >= kMinParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t i = 0; i < rows; ++i) {
    double* cr = c.data.data() + i * c.cols;
    for (std::size_t r = 0; r < a.rows; ++r) {
      const double s = a.data[r * a.cols + i];
      const double* br = b.data.data() + r * b.cols;
      for (std::size_t k = 0; k < b.cols; ++k) cr[k] += s * br[k];
    }
  }
  return c;
}

Matrix gemm_nn(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("gemm_nn: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  const auto rows = static_cast<std::int64_t>(a.rows);
  const bool big = a.rows * a.cols * b.cols >= kMinParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t i = 0; i < rows; ++i) {
    double* cr = c.data.data() + i * c.cols;
    for (std::size_t r = 0; r < a.cols; ++r) {
      const double s = a.data[i * a.cols + r];
      const double* br = b.data.data() + r * b.cols;
      for (std::size_t k = 0; k < b.cols; ++k) cr[k] += s * br[k];
    }
  }
  return c;
}

void rtn_encode(std::span<const double> values, const nvfp4::ScaleSet& scales,
                std::span<nvfp4::Code> out) {
  if (out.size() != values.size()) throw std::invalid_argument("rtn_encode: output size differs");
  nvfp4::check_scales(scales, values.size());
  const auto n = static_cast<std::int64_t>(values.size());
  const bool big = values.size() >= kMinParallelWork;
  // rtn_code throws on NaN; exceptions must not escape the parallel region.
  bool failed = false;
#pragma omp parallel for schedule(static) if (big) reduction(|| : failed)
  for (std::int64_t i = 0; i < n; ++i) {
    try {
      out[i] = nvfp4::rtn_code(values[i], scales.scale_product(i));
    } catch (...) {
      failed = true;
    }
  }
  if (failed) throw std::invalid_argument("rtn_encode: non-finite input value");
}

}  // namespace parallel
}  // namespace faar::kernels
