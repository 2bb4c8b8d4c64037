// Copyright 2026 The FAAR-NVFP4 Authors
// SPDX-License-Identifier: Apache-2.0

#include "faar/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>
#include <system_error>

#include <fmt/format.h>
#include <unistd.h>

#include "faar/nvfp4.hpp"

namespace faar::io {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::file: return "file error";
    case ErrorKind::malformed_header: return "malformed header";
    case ErrorKind::truncated_payload: return "truncated payload";
    case ErrorKind::dtype_mismatch: return "dtype mismatch";
    case ErrorKind::empty_tensor: return "empty tensor";
    case ErrorKind::size_mismatch: return "size mismatch";
    case ErrorKind::bad_magic: return "bad magic";
    case ErrorKind::version_mismatch: return "version mismatch";
  }
  return "io error";
}

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{in[i]} << (8 * i);
  return v;
}

std::uint32_t get_u32(std::span<const std::uint8_t> in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{in[i]} << (8 * i);
  return v;
}

const char* dtype_tag(DType d) { return d == DType::f32 ? "f32" : "f64"; }
std::size_t dtype_width(DType d) { return d == DType::f32 ? 4 : 8; }

DType parse_dtype(const json& j) {
  if (!j.is_string()) throw IoError(ErrorKind::malformed_header, "dtype must be a string");
  const auto s = j.get<std::string>();
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw IoError(ErrorKind::dtype_mismatch, "unsupported dtype '" + s + "'");
}

}  // namespace

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(ErrorKind::file, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + fmt::format(".tmp.{}", ::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(ErrorKind::file, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(ErrorKind::file, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError(ErrorKind::file, "cannot rename into '" + path.string() + "'");
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> encode_tensor(const TensorFile& file) {
  const Tensor& t = file.tensor;
  if (t.shape.empty() || element_count(t.shape) == 0)
    throw IoError(ErrorKind::empty_tensor, "refusing to save a tensor with no elements");
  if (element_count(t.shape) != t.values.size())
    throw IoError(ErrorKind::size_mismatch, "tensor values do not match its shape");

  const json header = {{"name", file.name},
                       {"dtype", dtype_tag(file.dtype)},
                       {"shape", t.shape},
                       {"byte_order", "LE"},
                       {"meta", file.meta}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + text.size() + t.values.size() * dtype_width(file.dtype));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (double v : t.values) {
    if (file.dtype == DType::f64) {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }
  return out;
}

TensorFile decode_tensor(std::span<const std::uint8_t> bytes, std::optional<DType> expected) {
  if (bytes.size() < 8) throw IoError(ErrorKind::malformed_header, "file shorter than header length");
  const std::uint64_t hlen = get_u64(bytes);
  if (hlen > bytes.size() - 8) throw IoError(ErrorKind::malformed_header, "header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::parse_error& e) {
    throw IoError(ErrorKind::malformed_header, e.what());
  }
  if (!header.is_object() || !header.contains("dtype") || !header.contains("shape"))
    throw IoError(ErrorKind::malformed_header, "header needs 'dtype' and 'shape'");
  if (header.value("byte_order", std::string("LE")) != "LE")
    throw IoError(ErrorKind::malformed_header, "only little-endian payloads are supported");

  TensorFile file;
  file.dtype = parse_dtype(header["dtype"]);
  if (expected && *expected != file.dtype)
    throw IoError(ErrorKind::dtype_mismatch,
                  fmt::format("expected {}, file holds {}", dtype_tag(*expected), dtype_tag(file.dtype)));
  try {
    file.name = header.value("name", std::string());
    file.tensor.shape = header["shape"].get<Shape>();
  } catch (const json::exception& e) {
    throw IoError(ErrorKind::malformed_header, e.what());
  }
  if (header.contains("meta")) file.meta = header["meta"];

  const Shape& shape = file.tensor.shape;
  if (shape.empty()) throw IoError(ErrorKind::empty_tensor, "tensor has no dimensions");
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw IoError(ErrorKind::empty_tensor, "tensor has a zero-length dimension");
    if (n > std::numeric_limits<std::size_t>::max() / d)
      throw IoError(ErrorKind::malformed_header, "shape overflows");
    n *= d;
  }

  const std::size_t width = dtype_width(file.dtype);
  const std::size_t available = bytes.size() - 8 - hlen;
  if (n > available / width)
    throw IoError(ErrorKind::truncated_payload,
                  fmt::format("need {} bytes of payload, file has {}", n * width, available));
  if (available != n * width)
    throw IoError(ErrorKind::size_mismatch,
                  fmt::format("{} trailing bytes after payload", available - n * width));

  const auto payload = bytes.subspan(8 + hlen);
  file.tensor.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (file.dtype == DType::f64)
      file.tensor.values[i] = std::bit_cast<double>(get_u64(payload.subspan(i * 8)));
    else
      file.tensor.values[i] = std::bit_cast<float>(get_u32(payload.subspan(i * 4)));
  }
  return file;
}

void save_tensor(const TensorFile& file, const fs::path& path) {
  write_file_atomic(path, encode_tensor(file));
}

void save_tensor(const Tensor& tensor, const fs::path& path, const std::string& name, DType dtype) {
  save_tensor(TensorFile{name, dtype, tensor, json::object()}, path);
}

TensorFile load_tensor_file(const fs::path& path, std::optional<DType> expected) {
  const auto bytes = read_file(path);
  TensorFile f = decode_tensor(bytes, expected);
  if (f.name.empty()) f.name = path.stem().string();
  return f;
}

Tensor load_tensor(const fs::path& path) { return load_tensor_file(path).tensor; }

void save_rounding_vars(const RoundingCheckpoint& ckpt, const fs::path& path) {
  const RoundingVars& rv = ckpt.rv;
  std::vector<std::uint8_t> blocks;
  blocks.reserve(rv.scales.block.size());
  for (double s : rv.scales.block) blocks.push_back(nvfp4::e4m3_encode(s));
  TensorFile f;
  f.name = ckpt.layer;
  f.dtype = DType::f64;
  f.tensor = Tensor{rv.shape, rv.v};
  f.meta = {{"kind", "rounding_vars"},
            {"source", ckpt.source.string()},
            {"beta", ckpt.beta},
            {"scales",
             {{"global", rv.scales.global}, {"block_size", rv.scales.block_size}, {"blocks", blocks}}}};
  save_tensor(f, path);
}

RoundingCheckpoint load_rounding_vars(const fs::path& path) {
  const TensorFile f = load_tensor_file(path, DType::f64);
  if (f.meta.value("kind", std::string()) != "rounding_vars")
    throw IoError(ErrorKind::malformed_header, "'" + path.string() + "' is not a rounding-variable checkpoint");

  RoundingCheckpoint ckpt;
  nvfp4::ScaleSet scales;
  try {
    ckpt.layer = f.name;
    ckpt.source = f.meta.at("source").get<std::string>();
    ckpt.beta = f.meta.value("beta", 0.0);
    const json& s = f.meta.at("scales");
    scales.global = s.at("global").get<double>();
    scales.block_size = s.at("block_size").get<std::size_t>();
    for (auto b : s.at("blocks").get<std::vector<std::uint8_t>>()) scales.block.push_back(nvfp4::e4m3_decode(b));
  } catch (const json::exception& e) {
    throw IoError(ErrorKind::malformed_header, e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(ErrorKind::malformed_header, e.what());
  }
  if (ckpt.source.is_relative()) ckpt.source = path.parent_path() / ckpt.source;

  const Tensor w = load_tensor(ckpt.source);
  if (w.shape != f.tensor.shape)
    throw IoError(ErrorKind::size_mismatch, "checkpoint shape differs from its source weights");
  ckpt.rv = init_rounding_vars(w, scales);
  for (double v : f.tensor.values)
    if (!(v >= 0.0 && v <= 1.0)) throw IoError(ErrorKind::malformed_header, "checkpoint holds v outside [0, 1]");
  ckpt.rv.v = f.tensor.values;
  for (std::size_t i = 0; i < ckpt.rv.size(); ++i)
    if (ckpt.rv.frozen[i]) ckpt.rv.v[i] = 0.0;
  return ckpt;
}

}  // namespace faar::io
