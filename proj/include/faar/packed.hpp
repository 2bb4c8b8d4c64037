// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Packed NVFP4 file, all integers little-endian:
//
//   "NVF4" | version u16 | ndim u16 | dims u64 x ndim | block_size u32
//   | s_global f32 | s_g as one E4M3 byte per block
//   | codes, two per byte (element 2k low nibble, 2k+1 high nibble), zero-padded

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "faar/nvfp4.hpp"

namespace faar::io {

inline constexpr std::uint16_t kPackedVersion = 1;

/// Exact byte size of a packed file for the given shape rank and element count.
std::size_t packed_size(std::size_t ndim, std::size_t elements, std::size_t block_size);

std::vector<std::uint8_t> pack_nvfp4(const nvfp4::QuantizedTensor& q);
nvfp4::QuantizedTensor unpack_nvfp4(std::span<const std::uint8_t> bytes);

void write_nvfp4(const nvfp4::QuantizedTensor& q, const std::filesystem::path& path);
nvfp4::QuantizedTensor read_nvfp4(const std::filesystem::path& path);

/// Deployability checks on an exported tensor. Every count must be zero.
struct ExportCheck {
  std::size_t node_violations = 0;      // dequantized value is not +-node * s_g * s_global
  std::size_t reencode_violations = 0;  // RTN of the dequantized value gives a different code
  std::size_t scale_violations = 0;     // scale not E4M3 / FP32 representable
  bool roundtrip_ok = true;             // unpack(pack(q)) == q

  std::size_t total() const {
    return node_violations + reencode_violations + scale_violations + (roundtrip_ok ? 0 : 1);
  }
};

ExportCheck check_export(const nvfp4::QuantizedTensor& q);

}  // namespace faar::io
