// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace faar {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major tensor of doubles.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    if (element_count(shape) != values.size())
      throw std::invalid_argument("tensor: element count does not match shape");
  }

  std::size_t size() const { return values.size(); }
  bool operator==(const Tensor&) const = default;
};

/// Dense row-major matrix. Weights are stored [out_dim x in_dim],
/// activations [batch x features].
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> v)
      : rows(r), cols(c), data(std::move(v)) {
    if (data.size() != r * c)
      throw std::invalid_argument("matrix: element count does not match shape");
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  Shape shape() const { return {rows, cols}; }
  bool operator==(const Matrix&) const = default;
};

inline Tensor to_tensor(const Matrix& m) { return Tensor{m.shape(), m.data}; }

inline Matrix to_matrix(const Tensor& t) {
  if (t.shape.size() == 1) return Matrix(1, t.shape[0], t.values);
  if (t.shape.size() != 2)
    throw std::invalid_argument("expected a 1-D or 2-D tensor, got rank " +
                                std::to_string(t.shape.size()));
  return Matrix(t.shape[0], t.shape[1], t.values);
}

}  // namespace faar
