#pragma once

// Raw little-endian tensor files.
//
//   bytes 0..3   magic "CRCT"
//   byte  4      dtype code (see DType)
//   byte  5      rank
//   bytes 6..7   reserved, zero
//   then rank x u32 dimensions, zero-padded to a 16-byte boundary, then the payload.
//
// A rank-2 header is exactly 16 bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crcda/error.hpp"
#include "crcda/tensor.hpp"

namespace crcda {

static_assert(std::endian::native == std::endian::little, "tensor files are written in host byte order");

enum class DType : std::uint8_t { kF32 = 1, kU8 = 2, kI32 = 3, kF64 = 4 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32: return 4;
    case DType::kU8: return 1;
    case DType::kI32: return 4;
    case DType::kF64: return 8;
  }
  throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(t)));
}

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kF32; }
template <>
constexpr DType dtype_of<double>() { return DType::kF64; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::kU8; }
template <>
constexpr DType dtype_of<std::int32_t>() { return DType::kI32; }

struct TensorHeader {
  DType dtype = DType::kF32;
  Shape shape;

  std::size_t header_bytes() const { return (8 + 4 * shape.size() + 15) / 16 * 16; }
  std::size_t payload_bytes() const { return numel(shape) * dtype_size(dtype); }
};

inline std::vector<char> encode_header(const TensorHeader& h) {
  require(h.shape.size() <= 255, "tensor rank too large");
  std::vector<char> out(h.header_bytes(), 0);
  std::memcpy(out.data(), "CRCT", 4);
  out[4] = static_cast<char>(h.dtype);
  out[5] = static_cast<char>(h.shape.size());
  for (std::size_t i = 0; i < h.shape.size(); ++i) {
    const auto d = static_cast<std::uint32_t>(h.shape[i]);
    std::memcpy(out.data() + 8 + 4 * i, &d, 4);
  }
  return out;
}

template <class E>
void write_tensor_file(const std::filesystem::path& path, const Shape& shape, std::span<const E> values) {
  require(values.size() == numel(shape), "write_tensor_file: value count does not match shape");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  auto hdr = encode_header({dtype_of<E>(), shape});
  os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(E)));
  if (!os) throw FormatError("write failed for " + path.string());
}

/// Reads and validates the header; checks that the file length matches it exactly.
inline TensorHeader read_tensor_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("missing tensor file " + path.string());
  char pre[8];
  if (!is.read(pre, 8) || std::memcmp(pre, "CRCT", 4) != 0) throw FormatError("bad magic in " + path.string());
  TensorHeader h;
  h.dtype = static_cast<DType>(static_cast<std::uint8_t>(pre[4]));
  (void)dtype_size(h.dtype);
  const auto rank = static_cast<std::uint8_t>(pre[5]);
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint32_t d = 0;
    if (!is.read(reinterpret_cast<char*>(&d), 4)) throw FormatError("truncated header in " + path.string());
    if (d == 0) throw FormatError("zero dimension in " + path.string());
    h.shape.push_back(d);
  }
  const auto size = std::filesystem::file_size(path);
  if (size != h.header_bytes() + h.payload_bytes())
    throw FormatError("length mismatch in " + path.string() + ": " + std::to_string(size) + " bytes, header implies " +
                      std::to_string(h.header_bytes() + h.payload_bytes()));
  return h;
}

template <class E>
std::vector<E> read_tensor_file(const std::filesystem::path& path, const Shape& expected_shape) {
  const TensorHeader h = read_tensor_header(path);
  if (h.dtype != dtype_of<E>()) throw FormatError("unexpected dtype in " + path.string());
  if (h.shape != expected_shape)
    throw FormatError("shape " + shape_str(h.shape) + " in " + path.string() + ", expected " +
                      shape_str(expected_shape));
  std::ifstream is(path, std::ios::binary);
  is.seekg(static_cast<std::streamoff>(h.header_bytes()));
  std::vector<E> out(numel(h.shape));
  if (!is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size() * sizeof(E))))
    throw FormatError("truncated payload in " + path.string());
  return out;
}

}  // namespace crcda
