// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// NVFP4 numerical format: E2M1 element codes, FP8 (E4M3) per-block scales and
// an FP32 tensor-level scale. Everything here is a pure function of its
// inputs; internal arithmetic is done in double precision.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "faar/tensor.hpp"

namespace faar::nvfp4 {

/// Nonnegative E2M1 magnitudes, indexed by the low three code bits.
inline constexpr std::array<double, 8> kNodes = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
inline constexpr double kMaxNode = 6.0;

inline constexpr double kE4m3Max = 448.0;
/// Smallest positive E4M3 value (subnormal 2^-9).
inline constexpr double kE4m3MinPositive = 1.0 / 512.0;

inline constexpr std::size_t kDefaultBlockSize = 16;

/// 4-bit E2M1 pattern laid out [sign | e1 | e0 | m].
struct Code {
  std::uint8_t bits = 0;

  constexpr bool negative() const { return (bits & 0x8) != 0; }
  constexpr std::uint8_t magnitude_index() const { return bits & 0x7; }
  constexpr bool operator==(const Code&) const = default;
};

/// (-1)^s * (e == 0 ? m * 0.5 : 2^(e-1) * (1 + m * 0.5)).
double decode(Code code);

/// Code for kNodes[index] with the given sign. Zero is always emitted as +0.
Code make_code(std::size_t node_index, bool negative);

/// Index of `magnitude` in kNodes, or -1 if it is not a node.
int node_index(double magnitude);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
  double span() const { return upper - lower; }
};

/// Consecutive nodes bracketing a normalized magnitude. A value sitting exactly
/// on a node n < 6 returns (n, next node); anything >= 6 returns (6, 6).
/// Throws std::invalid_argument on negative or NaN input.
Interval find_interval(double mag_norm);

/// Nearest E4M3 value (bias 7, subnormals, no infinities), ties to even,
/// saturating at 448. Requires a positive finite input.
double e4m3_round(double x);

/// Byte pattern of an E4M3-representable nonnegative value.
/// Throws if `value` is not exactly representable.
std::uint8_t e4m3_encode(double value);

/// Value of an E4M3 byte pattern. Throws on the NaN patterns.
double e4m3_decode(std::uint8_t bits);

/// Two-level scaling for one tensor: an FP32 global scale plus one
/// E4M3-representable scale per contiguous row-major block.
struct ScaleSet {
  double global = 1.0;
  std::vector<double> block;
  std::size_t block_size = kDefaultBlockSize;

  std::size_t block_of(std::size_t element) const { return element / block_size; }
  /// s_g * s_global for the element's block; exact in double.
  double scale_product(std::size_t element) const {
    return block[block_of(element)] * global;
  }
  bool operator==(const ScaleSet&) const = default;
};

inline std::size_t block_count(std::size_t elements, std::size_t block_size) {
  return (elements + block_size - 1) / block_size;
}

/// amax / (6 * 448) rounded to FP32; 1 when amax is 0.
double global_scale(double amax);

/// e4m3_round(block_amax / (6 * global)), never below kE4m3MinPositive.
double block_scale(double block_amax, double global);

/// s_global = amax / (6 * 448) rounded to FP32 (1 for an all-zero tensor);
/// s_g = e4m3_round(block_amax / (6 * s_global)), floored to the smallest
/// positive E4M3 value. The last block may be short.
ScaleSet compute_scales(std::span<const double> values, std::size_t block_size = kDefaultBlockSize);

struct QuantizedTensor {
  Shape shape;
  std::vector<Code> codes;
  ScaleSet scales;

  bool operator==(const QuantizedTensor&) const = default;
};

/// Throws std::invalid_argument when `scales` does not cover `n` elements.
void check_scales(const ScaleSet& scales, std::size_t n);

/// RTN code for a weight with the given s_g * s_global. The normalized
/// magnitude is clamped to [0, 6]; ties go to the node whose mantissa bit is 0.
Code rtn_code(double w, double scale_product);

QuantizedTensor quantize_rtn(const Tensor& w, const ScaleSet& scales);

/// decode(code) * s_g * s_global per element.
Tensor dequantize(const QuantizedTensor& q);

}  // namespace faar::nvfp4
