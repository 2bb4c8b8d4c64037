// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Continuous relaxation of NVFP4 rounding. Each weight keeps a learnable
// v in [0, 1] that interpolates between the two grid nodes bracketing its
// normalized magnitude:
//
//   w_q = sign * (lower + h(v) * (upper - lower)) * s_g * s_global,
//   h(v) = 1 / (1 + exp(-beta * (v - 0.5)))
//
// The interval span multiplies dh/dv, so weights in wide intervals such as
// (4, 6) get proportionally larger gradients than those in (0.5, 1).

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "faar/nvfp4.hpp"
#include "faar/tensor.hpp"

namespace faar {

struct RoundingVars {
  Shape shape;
  std::vector<double> v;
  std::vector<double> lower;       // normalized space
  std::vector<double> upper;       // normalized space
  std::vector<double> sign;        // +1 / -1; zero weights are +1
  std::vector<double> scale_prod;  // s_g * s_global
  std::vector<std::uint8_t> frozen;
  nvfp4::ScaleSet scales;

  std::size_t size() const { return v.size(); }
  double span(std::size_t i) const { return upper[i] - lower[i]; }
  std::size_t active_count() const;
};

struct BetaSchedule {
  double beta_start = 4.0;
  double beta_end = 40.0;
  std::size_t total_steps = 1;

  void validate() const;
};

/// Brackets every |w| / (s_g * s_global) (clamped to 6) and sets v to its
/// relative position inside the bracket. Elements at 6 are frozen with v = 0.
RoundingVars init_rounding_vars(const Tensor& w, const nvfp4::ScaleSet& scales);

double soft_round(double v, double beta);

/// dh/dv = beta * h * (1 - h).
double soft_round_slope(double v, double beta);

/// Soft-quantized weights; frozen elements return sign * lower * scale_prod.
std::vector<double> soft_quantize(const RoundingVars& rv, double beta);

/// d(soft_quantize)/dv per element; zero on frozen elements.
std::vector<double> soft_quantize_slope(const RoundingVars& rv, double beta);

struct RegLoss {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean of 1 - (2v - 1)^2 over non-frozen elements, with its gradient.
RegLoss round_reg_loss(const RoundingVars& rv);

/// Linear ramp from beta_start to beta_end; step must not exceed total_steps.
double beta_at(const BetaSchedule& schedule, std::size_t step);

void clip_vars(RoundingVars& rv);

/// Binary lower/upper choices, 1 = upper.
using Decisions = std::vector<std::uint8_t>;

struct Hardened {
  Decisions decisions;
  Tensor weights;
};

/// Threshold at v >= 0.5 (frozen elements take the lower node).
Hardened harden(const RoundingVars& rv);

/// Dequantized weights for an explicit set of decisions.
Tensor hard_weights(const RoundingVars& rv, const Decisions& decisions);

/// Packs hard decisions into NVFP4 codes under rv's scales.
nvfp4::QuantizedTensor to_quantized(const RoundingVars& rv, const Decisions& decisions);

/// Decisions that reproduce a quantized tensor bracketed by rv.
/// Throws if a code is not one of its element's two bracketing nodes.
Decisions decisions_from_codes(const RoundingVars& rv, const nvfp4::QuantizedTensor& q);

}  // namespace faar
