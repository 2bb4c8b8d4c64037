// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/nvfp4.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "faar/kernels.hpp"

namespace faar::nvfp4 {

double decode(Code code) {
  const int e = (code.bits >> 1) & 0x3;
  const int m = code.bits & 0x1;
  const double mag = e == 0 ? m * 0.5 : std::ldexp(1.0 + m * 0.5, e - 1);
  return code.negative() ? -mag : mag;
}

Code make_code(std::size_t node_index, bool negative) {
  if (node_index >= kNodes.size()) throw std::invalid_argument("make_code: node index out of range");
  auto bits = static_cast<std::uint8_t>(node_index);
  if (negative && node_index != 0) bits |= 0x8;
  return Code{bits};
}

int node_index(double magnitude) {
  for (std::size_t i = 0; i < kNodes.size(); ++i)
    if (kNodes[i] == magnitude) return static_cast<int>(i);
  return -1;
}

Interval find_interval(double mag_norm) {
  if (!(mag_norm >= 0.0))
    throw std::invalid_argument("find_interval: normalized magnitude must be >= 0, got " +
                                std::to_string(mag_norm));
  if (mag_norm >= kMaxNode) return {kMaxNode, kMaxNode};
  // Last node <= mag_norm; it is never the final node here.
  std::size_t k = 0;
  while (kNodes[k + 1] <= mag_norm) ++k;
  return {kNodes[k], kNodes[k + 1]};
}

double e4m3_round(double x) {
  if (!(x > 0.0) || !std::isfinite(x))
    throw std::invalid_argument("e4m3_round: input must be positive and finite, got " +
                                std::to_string(x));
  if (x >= kE4m3Max) return kE4m3Max;
  int e = 0;
  std::frexp(x, &e);
  // Binade exponent, floored at the subnormal range (normal min is 2^-6).
  const int exponent = std::max(e - 1, -6);
  const double quantum = std::ldexp(1.0, exponent - 3);
  // x / quantum is exact; nearbyint rounds half to even in the default mode.
  const double r = std::nearbyint(x / quantum);
  return std::min(r * quantum, kE4m3Max);
}

std::uint8_t e4m3_encode(double value) {
  if (!(value >= 0.0) || value > kE4m3Max)
    throw std::invalid_argument("e4m3_encode: value out of range");
  if (value == 0.0) return 0;
  std::uint8_t bits = 0;
  if (value < std::ldexp(1.0, -6)) {
    const double m = value / kE4m3MinPositive;
    bits = static_cast<std::uint8_t>(m);
  } else {
    int e = 0;
    std::frexp(value, &e);
    const int exponent = e - 1;
    const double m = value / std::ldexp(1.0, exponent - 3) - 8.0;
    bits = static_cast<std::uint8_t>(((exponent + 7) << 3) | static_cast<int>(m));
  }
  if (e4m3_decode(bits) != value)
    throw std::invalid_argument("e4m3_encode: value is not E4M3-representable");
  return bits;
}

double e4m3_decode(std::uint8_t bits) {
  if ((bits & 0x7F) == 0x7F) throw std::invalid_argument("e4m3_decode: NaN pattern");
  const int field = (bits >> 3) & 0xF;
  const int m = bits & 0x7;
  const double mag = field == 0 ? m * kE4m3MinPositive : std::ldexp(8.0 + m, field - 10);
  return (bits & 0x80) ? -mag : mag;
}

double global_scale(double amax) {
  if (amax == 0.0) return 1.0;
  const float g = static_cast<float>(amax / (kMaxNode * kE4m3Max));
  if (!(g > 0.0f) || !std::isfinite(g))
    throw std::invalid_argument("global scale not representable in FP32");
  return g;
}

double block_scale(double block_amax, double global) {
  if (block_amax == 0.0) return kE4m3MinPositive;
  return std::max(e4m3_round(block_amax / (kMaxNode * global)), kE4m3MinPositive);
}

ScaleSet compute_scales(std::span<const double> values, std::size_t block_size) {
  if (values.empty()) throw std::invalid_argument("compute_scales: empty tensor");
  if (block_size == 0) throw std::invalid_argument("compute_scales: block_size must be >= 1");

  double amax = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("compute_scales: non-finite value");
    amax = std::max(amax, std::abs(v));
  }

  ScaleSet scales;
  scales.block_size = block_size;
  scales.global = global_scale(amax);
  const std::size_t nblocks = block_count(values.size(), block_size);
  scales.block.resize(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) {
    const std::size_t begin = b * block_size;
    const std::size_t end = std::min(values.size(), begin + block_size);
    double block_amax = 0.0;
    for (std::size_t i = begin; i < end; ++i) block_amax = std::max(block_amax, std::abs(values[i]));
    scales.block[b] = block_scale(block_amax, scales.global);
  }
  return scales;
}

void check_scales(const ScaleSet& scales, std::size_t n) {
  if (scales.block_size == 0) throw std::invalid_argument("scale set has block_size 0");
  if (scales.block.size() != block_count(n, scales.block_size))
    throw std::invalid_argument("scale set covers " + std::to_string(scales.block.size()) +
                                " blocks, tensor needs " +
                                std::to_string(block_count(n, scales.block_size)));
  if (!(scales.global > 0.0)) throw std::invalid_argument("scale set has nonpositive global scale");
}

Code rtn_code(double w, double scale_product) {
  const double mag = std::min(std::abs(w) / scale_product, kMaxNode);
  const Interval iv = find_interval(mag);
  if (iv.span() == 0.0) return make_code(kNodes.size() - 1, w < 0.0);
  const int lo = node_index(iv.lower);
  const double d_lo = mag - iv.lower;
  const double d_hi = iv.upper - mag;
  int pick = lo;
  if (d_hi < d_lo) {
    pick = lo + 1;
  } else if (d_hi == d_lo) {
    // Tie: the node with mantissa bit 0 is the one with an even code.
    pick = (lo % 2 == 0) ? lo : lo + 1;
  }
  return make_code(static_cast<std::size_t>(pick), w < 0.0);
}

QuantizedTensor quantize_rtn(const Tensor& w, const ScaleSet& scales) {
  check_scales(scales, w.size());
  QuantizedTensor q{w.shape, std::vector<Code>(w.size()), scales};
  kernels::rtn_encode(w.values, scales, q.codes);
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  check_scales(q.scales, q.codes.size());
  std::vector<double> out(q.codes.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = decode(q.codes[i]) * q.scales.block[q.scales.block_of(i)] * q.scales.global;
  return Tensor{q.shape, std::move(out)};
}

}  // namespace faar::nvfp4
