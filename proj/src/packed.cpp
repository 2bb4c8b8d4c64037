// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/packed.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>

#include <fmt/format.h>

#include "faar/tensor_io.hpp"

namespace faar::io {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'N', 'V', 'F', '4'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T))
      throw IoError(ErrorKind::size_mismatch, fmt::format("file ends inside {}", what));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(T{bytes_[pos_ + i]} << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::span<const std::uint8_t> rest() const { return bytes_.subspan(pos_); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t packed_size(std::size_t ndim, std::size_t elements, std::size_t block_size) {
  const std::size_t header = 4 + 2 + 2 + 8 * ndim + 4;
  return header + 4 + nvfp4::block_count(elements, block_size) + (elements + 1) / 2;
}

std::vector<std::uint8_t> pack_nvfp4(const nvfp4::QuantizedTensor& q) {
  const std::size_t n = q.codes.size();
  if (q.shape.empty() || n == 0 || element_count(q.shape) != n)
    throw std::invalid_argument("pack_nvfp4: shape and code count disagree or tensor is empty");
  if (q.shape.size() > 0xFFFF) throw std::invalid_argument("pack_nvfp4: too many dimensions");
  if (q.scales.block_size == 0 || q.scales.block_size > 0xFFFFFFFFu)
    throw std::invalid_argument("pack_nvfp4: block size out of range");
  nvfp4::check_scales(q.scales, n);
  const auto global = static_cast<float>(q.scales.global);
  if (static_cast<double>(global) != q.scales.global)
    throw std::invalid_argument("pack_nvfp4: global scale is not an FP32 value");

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.reserve(packed_size(q.shape.size(), n, q.scales.block_size));
  put<std::uint16_t>(out, kPackedVersion);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(q.shape.size()));
  for (std::size_t d : q.shape) put<std::uint64_t>(out, d);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(q.scales.block_size));
  put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(global));
  for (double s : q.scales.block) out.push_back(nvfp4::e4m3_encode(s));
  for (std::size_t i = 0; i < n; i += 2) {
    std::uint8_t byte = q.codes[i].bits & 0xF;
    if (i + 1 < n) byte |= static_cast<std::uint8_t>((q.codes[i + 1].bits & 0xF) << 4);
    out.push_back(byte);
  }
  return out;
}

nvfp4::QuantizedTensor unpack_nvfp4(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw IoError(ErrorKind::bad_magic, "not a packed NVFP4 file");
  Reader r(bytes.subspan(kMagic.size()));
  const auto version = r.get<std::uint16_t>("version");
  if (version != kPackedVersion)
    throw IoError(ErrorKind::version_mismatch, fmt::format("file version {}, expected {}", version, kPackedVersion));

  nvfp4::QuantizedTensor q;
  const auto ndim = r.get<std::uint16_t>("rank");
  if (ndim == 0) throw IoError(ErrorKind::empty_tensor, "packed tensor has no dimensions");
  std::size_t n = 1;
  for (std::uint16_t k = 0; k < ndim; ++k) {
    const auto d = r.get<std::uint64_t>("shape");
    if (d == 0) throw IoError(ErrorKind::empty_tensor, "packed tensor has a zero-length dimension");
    if (n > (2 * bytes.size() + 2) / d) throw IoError(ErrorKind::size_mismatch, "shape larger than the file");
    n *= d;
    q.shape.push_back(d);
  }
  q.scales.block_size = r.get<std::uint32_t>("block size");
  if (q.scales.block_size == 0) throw IoError(ErrorKind::size_mismatch, "block size is zero");
  q.scales.global = std::bit_cast<float>(r.get<std::uint32_t>("global scale"));
  if (!(q.scales.global > 0.0) || !std::isfinite(q.scales.global))
    throw IoError(ErrorKind::size_mismatch, "global scale is not positive and finite");

  const std::size_t blocks = nvfp4::block_count(n, q.scales.block_size);
  const std::size_t code_bytes = (n + 1) / 2;
  if (r.remaining() != blocks + code_bytes)
    throw IoError(ErrorKind::size_mismatch,
                  fmt::format("expected {} bytes of scales and codes, found {}", blocks + code_bytes, r.remaining()));
  const auto rest = r.rest();
  q.scales.block.reserve(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    double s = 0.0;
    try {
      s = nvfp4::e4m3_decode(rest[b]);
    } catch (const std::invalid_argument& e) {
      throw IoError(ErrorKind::size_mismatch, e.what());
    }
    if (!(s > 0.0)) throw IoError(ErrorKind::size_mismatch, fmt::format("block {} has a non-positive scale", b));
    q.scales.block.push_back(s);
  }
  q.codes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t byte = rest[blocks + i / 2];
    q.codes[i].bits = (i % 2 == 0) ? (byte & 0xF) : (byte >> 4);
  }
  if (n % 2 == 1 && (rest[blocks + n / 2] >> 4) != 0)
    throw IoError(ErrorKind::size_mismatch, "padding nibble is not zero");
  return q;
}

void write_nvfp4(const nvfp4::QuantizedTensor& q, const std::filesystem::path& path) {
  write_file_atomic(path, pack_nvfp4(q));
}

nvfp4::QuantizedTensor read_nvfp4(const std::filesystem::path& path) {
  return unpack_nvfp4(read_file(path));
}

ExportCheck check_export(const nvfp4::QuantizedTensor& q) {
  ExportCheck c;
  for (double s : q.scales.block) {
    try {
      if (!(s > 0.0)) ++c.scale_violations;
      else nvfp4::e4m3_encode(s);
    } catch (const std::invalid_argument&) {
      ++c.scale_violations;
    }
  }
  if (static_cast<double>(static_cast<float>(q.scales.global)) != q.scales.global) ++c.scale_violations;
  if (c.scale_violations > 0) return c;

  const Tensor w = nvfp4::dequantize(q);
  for (std::size_t i = 0; i < w.values.size(); ++i) {
    const double sp = q.scales.scale_product(i);
    if (nvfp4::node_index(std::abs(w.values[i]) / sp) < 0) ++c.node_violations;
    const nvfp4::Code again = nvfp4::rtn_code(w.values[i], sp);
    const nvfp4::Code stored = q.codes[i];
    const bool same = again == stored ||
                      (again.magnitude_index() == 0 && stored.magnitude_index() == 0);
    if (!same) ++c.reencode_violations;
  }
  try {
    c.roundtrip_ok = unpack_nvfp4(pack_nvfp4(q)) == q;
  } catch (const std::exception&) {
    c.roundtrip_ok = false;
  }
  return c;
}

}  // namespace faar::io
