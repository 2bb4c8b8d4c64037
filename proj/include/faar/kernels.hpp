// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense kernels used by the calibration loops. Each kernel has a serial
// reference and an OpenMP version with the same per-element summation order,
// so the two produce bitwise-identical results. The unqualified names
// forward to the parallel versions.

#pragma once

#include <span>

#include "faar/nvfp4.hpp"
#include "faar/tensor.hpp"

namespace faar::kernels {

namespace serial {
/// C[m x n] = A[m x k] * B[n x k]^T
Matrix gemm_nt(const Matrix& a, const Matrix& b);
/// C[n x k] = A[m x n]^T * B[m x k]
Matrix gemm_tn(const Matrix& a, const Matrix& b);
/// C[m x k] = A[m x n] * B[n x k]
Matrix gemm_nn(const Matrix& a, const Matrix& b);
void rtn_encode(std::span<const double> values, const nvfp4::ScaleSet& scales,
                std::span<nvfp4::Code> out);
}  // namespace serial

namespace parallel {
Matrix gemm_nt(const Matrix& a, const Matrix& b);
Matrix gemm_tn(const Matrix& a, const Matrix& b);
Matrix gemm_nn(const Matrix& a, const Matrix& b);
void rtn_encode(std::span<const double> values, const nvfp4::ScaleSet& scales,
                std::span<nvfp4::Code> out);
}  // namespace parallel

using parallel::gemm_nn;
using parallel::gemm_nt;
using parallel::gemm_tn;
using parallel::rtn_encode;

/// Number of threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace faar::kernels
