// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>

#include "faar/kernels.hpp"

namespace faar::kernels::serial {

Matrix gemm_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw std::invalid_argument("gemm_nt: inner dimensions differ");
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* br = b.data.data() + j * b.cols;
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      c(i, j) = acc;
    }
  }
  return c;
}

Matrix gemm_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw std::invalid_argument("gemm_tn: inner dimensions differ");
  Matrix c(a.cols, b.cols);
  for (std::size_t i = 0; i < a.cols; ++i) {
    double* cr = c.data.data() + i * c.cols;
    for (std::size_t r = 0; r < a.rows; ++r) {
      const double s = a(r, i);
      const double* br = b.data.data() + r * b.cols;
      for (std::size_t k = 0; k < b.cols; ++k) cr[k] += s * br[k];
    }
  }
  return c;
}

Matrix gemm_nn(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("gemm_nn: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* cr = c.data.data() + i * c.cols;
    for (std::size_t r = 0; r < a.cols; ++r) {
      const double s = a(i, r);
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
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = nvfp4::rtn_code(values[i], scales.scale_product(i));
}

}  // namespace faar::kernels::serial
