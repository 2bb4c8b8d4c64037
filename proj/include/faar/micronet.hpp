// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Full-model alignment on a small feed-forward network. The full-precision
// network is the teacher; the student shares its architecture with every
// layer soft-quantized through its RoundingVars. The objective is
//
//   lambda_kl * KL(P_fp || P_q) + ||H_fp - H_q||_F^2 + lambda_round * sum_l reg_l
//
// with P = softmax(Z / tau) and H the input of the head layer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "faar/adam.hpp"
#include "faar/rounding.hpp"
#include "faar/stage1.hpp"
#include "faar/tensor.hpp"

namespace faar {

/// Bias-free MLP: ReLU after every layer except the last (the head).
struct MicroNet {
  std::vector<LinearLayer> layers;

  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t num_classes() const { return layers.back().out_dim(); }
  std::vector<std::size_t> dims() const;
  void validate() const;

  /// He-initialized Gaussian weights for dims {d0, d1, ..., dL}.
  static MicroNet random(const std::vector<std::size_t>& dims, std::uint64_t seed);
};

inline const std::vector<std::size_t> kDefaultMicroNetDims = {16, 32, 32, 10};

struct ForwardPass {
  std::vector<Matrix> inputs;   // input of each layer (after activation quantization, if any)
  std::vector<Matrix> weights;  // weights used by each layer
  std::vector<Matrix> pre;      // pre-activation of each layer
  Matrix h_last;                // ReLU output feeding the head
  Matrix logits;
  Matrix probs;                 // softmax(logits / tau), row-wise
};

struct QuantizedMode {
  std::span<const RoundingVars> rvs;
  double beta = 40.0;
  bool hard = false;  // use hardened decisions instead of h_beta(v)
  bool quantize_activations = true;
  std::size_t block_size = nvfp4::kDefaultBlockSize;
};

/// Full-precision pass when `mode` is empty, otherwise the quantized student.
ForwardPass forward(const MicroNet& net, const Matrix& x, double tau,
                    const std::optional<QuantizedMode>& mode = std::nullopt);

Matrix softmax_rows(const Matrix& logits, double tau);

/// Batch mean of sum_c p log(p / max(q, 1e-12)), with 0 log 0 = 0.
/// Throws std::invalid_argument unless both inputs are row-stochastic.
double kl_loss(const Matrix& p_fp, const Matrix& p_q);

enum class BetaMode { continue_stage1, restart };

struct Stage2Config {
  std::size_t steps = 2500;
  AdamParams adam{1e-4, 0.9, 0.999, 1e-8};
  double lambda_kl = 1.0;
  double lambda_round = 0.01;
  double tau = 1.0;
  BetaMode beta_mode = BetaMode::continue_stage1;
  double beta_start = 4.0;  // used when beta_mode == restart
  double beta_end = 40.0;
  std::size_t batch_size = 0;  // 0 = full calibration set every step
  bool quantize_activations = true;
  std::size_t block_size = nvfp4::kDefaultBlockSize;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const Stage2Config&) const = default;
};

struct Stage2Parts {
  double kl = 0.0;
  double mse = 0.0;
  double round = 0.0;  // sum of per-layer regularizer means
  double total = 0.0;
};

Stage2Parts stage2_loss(const ForwardPass& teacher, const ForwardPass& student,
                        std::span<const RoundingVars> rvs, const Stage2Config& cfg);

struct Stage2Gradient {
  Stage2Parts parts;
  std::vector<std::vector<double>> dv;  // one per layer
};

/// Loss and exact reverse-mode gradient w.r.t. every layer's v. Activation
/// quantization is treated as identity on the backward pass.
Stage2Gradient backprop_stage2(const MicroNet& net, const Matrix& x, const ForwardPass& teacher,
                               std::span<const RoundingVars> rvs, double beta,
                               const Stage2Config& cfg);

struct Stage2TraceRow {
  std::size_t step = 0;
  double kl = 0.0;
  double mse = 0.0;
  double round = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

struct Stage2Result {
  std::vector<RoundingVars> rvs;
  std::vector<Stage2TraceRow> trace;  // steps + 1 rows
};

/// Joint Adam updates of all layers' v against the full-precision teacher.
/// In continue mode beta ramps from `stage1_beta_end` to cfg.beta_end.
/// Throws std::runtime_error if the loss becomes non-finite.
Stage2Result align_model(const MicroNet& net, std::vector<RoundingVars> rvs, const Matrix& data,
                         const Stage2Config& cfg, double stage1_beta_end = 40.0);

/// Stage 1 over every layer, each calibrated on the teacher's own inputs.
std::vector<Stage1Result> calibrate_layers(const MicroNet& net, const Matrix& data,
                                           const Stage1Config& cfg);

/// Initial rounding variables for every layer (no optimization).
std::vector<RoundingVars> init_net_vars(const MicroNet& net, std::size_t block_size);

/// KL(teacher || student) with hardened student weights and quantized activations.
double hardened_kl(const MicroNet& net, const Matrix& data, std::span<const RoundingVars> rvs,
                   double tau, std::size_t block_size = nvfp4::kDefaultBlockSize);

}  // namespace faar
