#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "fewshot/error.hpp"
#include "fewshot/tensor.hpp"

// Raw tensor file ("MMTN"): magic, u32 version=1, u8 dtype (0=f32, 1=f64),
// u32 rank, rank x u64 extents, little-endian row-major payload.

namespace fewshot {

constexpr std::uint32_t kMmtnVersion = 1;

template <typename S>
constexpr std::uint8_t dtype_tag();
template <>
constexpr std::uint8_t dtype_tag<float>() {
  return 0;
}
template <>
constexpr std::uint8_t dtype_tag<double>() {
  return 1;
}

namespace io_detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  // Little-endian host assumed (x86/ARM); static data path, not a wire protocol.
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw DataError("truncated tensor stream while reading " + what);
  return v;
}

}  // namespace io_detail

template <typename S>
void write_mmtn(std::ostream& os, const Tensor<S>& t) {
  os.write("MMTN", 4);
  io_detail::write_le<std::uint32_t>(os, kMmtnVersion);
  io_detail::write_le<std::uint8_t>(os, dtype_tag<S>());
  io_detail::write_le<std::uint32_t>(os, std::uint32_t(t.rank()));
  for (auto e : t.shape()) io_detail::write_le<std::uint64_t>(os, std::uint64_t(e));
  os.write(reinterpret_cast<const char*>(t.data()),
           std::streamsize(sizeof(S)) * t.numel());
  if (!os) throw DataError("failed writing tensor stream");
}

template <typename S>
void save_mmtn(const std::string& path, const Tensor<S>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path);
  write_mmtn(f, t);
}

// Reads header and payload; dtype of the stream must equal S.
template <typename S>
Tensor<S> read_mmtn(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MMTN", 4) != 0)
    throw DataError("bad tensor magic (expected MMTN)");
  const auto version = io_detail::read_le<std::uint32_t>(is, "version");
  if (version != kMmtnVersion)
    throw DataError("unsupported MMTN version " + std::to_string(version));
  const auto dtype = io_detail::read_le<std::uint8_t>(is, "dtype");
  if (dtype != dtype_tag<S>())
    throw DataError("tensor dtype mismatch: stream has tag " + std::to_string(int(dtype)) +
                    ", expected " + std::to_string(int(dtype_tag<S>())));
  const auto rank = io_detail::read_le<std::uint32_t>(is, "rank");
  if (rank > 8) throw DataError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::int64_t numel = 1;
  for (auto& e : shape) {
    e = std::int64_t(io_detail::read_le<std::uint64_t>(is, "extent"));
    if (e <= 0) throw DataError("non-positive tensor extent in stream");
    numel *= e;
  }
  Tensor<S> t(shape);
  if (!is.read(reinterpret_cast<char*>(t.data()), std::streamsize(sizeof(S)) * numel))
    throw DataError("truncated tensor payload");
  return t;
}

template <typename S>
Tensor<S> load_mmtn(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open tensor file: " + path);
  try {
    return read_mmtn<S>(f);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + " (" + path + ")");
  }
}

// Peeks the dtype tag of an MMTN stream without consuming semantics; used by
// loaders that accept either precision.
inline std::uint8_t peek_mmtn_dtype(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open tensor file: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "MMTN", 4) != 0)
    throw DataError("bad tensor magic in " + path);
  io_detail::read_le<std::uint32_t>(f, "version");
  return io_detail::read_le<std::uint8_t>(f, "dtype");
}

}  // namespace fewshot
