// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tensor container: an 8-byte little-endian header length, a JSON header
//   {"name": ..., "dtype": "f32" | "f64", "shape": [...], "byte_order": "LE", "meta": {...}}
// and the raw little-endian row-major payload.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "faar/rounding.hpp"
#include "faar/tensor.hpp"

namespace faar::io {

enum class ErrorKind {
  file,
  malformed_header,
  truncated_payload,
  dtype_mismatch,
  empty_tensor,
  size_mismatch,
  bad_magic,
  version_mismatch,
};

const char* to_string(ErrorKind kind);

class IoError : public std::runtime_error {
 public:
  IoError(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

enum class DType { f32, f64 };

struct TensorFile {
  std::string name;
  DType dtype = DType::f64;
  Tensor tensor;
  nlohmann::json meta = nlohmann::json::object();
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

std::vector<std::uint8_t> encode_tensor(const TensorFile& file);
TensorFile decode_tensor(std::span<const std::uint8_t> bytes,
                         std::optional<DType> expected = std::nullopt);

void save_tensor(const TensorFile& file, const std::filesystem::path& path);
void save_tensor(const Tensor& tensor, const std::filesystem::path& path, const std::string& name = "",
                 DType dtype = DType::f64);
TensorFile load_tensor_file(const std::filesystem::path& path,
                            std::optional<DType> expected = std::nullopt);
Tensor load_tensor(const std::filesystem::path& path);

/// Rounding-variable checkpoint: v as the payload, with the source weight
/// path and the exact scale set in the header so training can resume.
struct RoundingCheckpoint {
  std::string layer;
  std::filesystem::path source;
  RoundingVars rv;
  double beta = 0.0;  // beta the variables were last trained at
};

void save_rounding_vars(const RoundingCheckpoint& ckpt, const std::filesystem::path& path);
RoundingCheckpoint load_rounding_vars(const std::filesystem::path& path);

}  // namespace faar::io
