// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer-wise rounding calibration. For one linear layer W [out x in] and
// calibration inputs X [batch x in] the objective is
//
//   || X W^T - X_q W_q(V)^T ||_F^2 + lambda_round * mean(1 - (2v - 1)^2)
//
// where X_q is the RTN-quantized copy of X (fixed per batch) and W_q(V) is
// the soft-quantized weight. Only V is trained; W and its scales are frozen.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "faar/adam.hpp"
#include "faar/nvfp4.hpp"
#include "faar/rounding.hpp"
#include "faar/tensor.hpp"

namespace faar {

struct LinearLayer {
  std::string name;
  Matrix weights;  // [out_dim x in_dim]

  std::size_t in_dim() const { return weights.cols; }
  std::size_t out_dim() const { return weights.rows; }
  void validate() const;
};

/// RTN NVFP4 fake-quantization of activations: one global scale for the
/// matrix, blocks of `block_size` along each row. Returns dequantized values.
Matrix quantize_activations(const Matrix& x, std::size_t block_size = nvfp4::kDefaultBlockSize);

struct CalibBatch {
  Matrix x;
  Matrix x_q;

  /// Pairs `x` with its quantized copy.
  static CalibBatch from_inputs(Matrix x, std::size_t block_size = nvfp4::kDefaultBlockSize);
  /// Pairs `x` with itself (activation quantization disabled).
  static CalibBatch unquantized(Matrix x);
};

struct Stage1Config {
  std::size_t steps = 500;
  AdamParams adam{};  // learning rate 5e-4, decays (0.9, 0.999), eps 1e-8
  double lambda_round = 0.01;
  double beta_start = 4.0;
  double beta_end = 40.0;
  std::size_t block_size = nvfp4::kDefaultBlockSize;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const Stage1Config&) const = default;
};

struct Stage1Terms {
  double mse = 0.0;  // summed over calibration batches
  double reg = 0.0;  // unweighted regularizer mean
  double total = 0.0;
};

/// Output-reconstruction error of a layer over a fixed calibration set, with
/// the full-precision outputs X W^T cached.
class ReconstructionObjective {
 public:
  ReconstructionObjective(const LinearLayer& layer, std::span<const CalibBatch> batches);

  /// Sum over batches of ||X W^T - X_q Wq^T||_F^2.
  double mse(std::span<const double> wq) const;
  /// Sum over batches of 2 (X_q Wq^T - X W^T)^T X_q, i.e. d(mse)/d(Wq).
  Matrix mse_grad(std::span<const double> wq) const;

  const LinearLayer& layer() const { return *layer_; }

 private:
  Matrix as_matrix(std::span<const double> wq) const;

  const LinearLayer* layer_;
  std::span<const CalibBatch> batches_;
  std::vector<Matrix> y_fp_;
};

/// Sum over batches of ||X W^T - X_q Wq^T||_F^2 for explicit quantized weights.
double reconstruction_mse(const LinearLayer& layer, std::span<const CalibBatch> batches,
                          std::span<const double> wq);

Stage1Terms stage1_terms(const LinearLayer& layer, std::span<const CalibBatch> batches,
                         const RoundingVars& rv, double beta, double lambda_round);

double stage1_loss(const LinearLayer& layer, const CalibBatch& batch, const RoundingVars& rv,
                   double beta, double lambda_round);

/// d(stage1 loss)/dv, summed over batches; zero on frozen elements.
std::vector<double> stage1_grad(const LinearLayer& layer, std::span<const CalibBatch> batches,
                                const RoundingVars& rv, double beta, double lambda_round);

std::vector<double> stage1_grad(const LinearLayer& layer, const CalibBatch& batch,
                                const RoundingVars& rv, double beta, double lambda_round);

struct Stage1TraceRow {
  std::size_t step = 0;
  double mse_term = 0.0;
  double reg_term = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

struct Stage1Result {
  RoundingVars rv;
  std::vector<Stage1TraceRow> trace;  // steps + 1 rows; the last is after the final update
};

/// Runs cfg.steps full-batch Adam updates on v with clipping and a linear
/// beta ramp. Starts from init_rounding_vars unless `initial` is supplied.
/// Throws std::runtime_error if the loss becomes non-finite.
Stage1Result optimize_layer(const LinearLayer& layer, std::span<const CalibBatch> calib,
                            const Stage1Config& cfg);
Stage1Result optimize_layer(const LinearLayer& layer, std::span<const CalibBatch> calib,
                            const Stage1Config& cfg, RoundingVars initial);

/// Rounding variables for a layer under freshly computed scales.
RoundingVars init_layer_vars(const LinearLayer& layer, std::size_t block_size);

}  // namespace faar
