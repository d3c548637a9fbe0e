#pragma once

// FANT tensor container, all fields little-endian:
//   bytes 0..3   magic "FANT"
//   u32          rank
//   u32 x rank   dims
//   f64 x numel  row-major payload
// A file written by a big-endian producer starts with "TNAF" and is rejected
// at the magic check.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fanfreq/error.hpp"
#include "fanfreq/tensor.hpp"

namespace fanfreq::io {

inline constexpr std::array<char, 4> kFantMagic{'F', 'A', 'N', 'T'};
inline constexpr std::uint32_t kFantMaxRank = 8;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

[[noreturn]] inline void malformed(const std::string& what, std::streamoff offset) {
  throw IoError("FANT: " + what + " at byte offset " + std::to_string(offset));
}

inline std::uint32_t get_u32(std::istream& in, std::streamoff& offset, const char* field) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) malformed(std::string("truncated ") + field, offset);
  offset += 4;
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_fant(std::ostream& out, const Tensor& t) {
  if (t.rank() > kFantMaxRank) throw UsageError("FANT: rank above " + std::to_string(kFantMaxRank));
  out.write(kFantMagic.data(), 4);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.values) detail::put_f64(out, v);
  if (!out) throw IoError("FANT: write failed");
}

inline Tensor read_fant(std::istream& in) {
  std::streamoff offset = 0;
  char magic[4];
  if (!in.read(magic, 4)) detail::malformed("truncated magic", offset);
  if (std::memcmp(magic, kFantMagic.data(), 4) != 0) {
    detail::malformed("bad magic '" + std::string(magic, 4) + "' (expected FANT, little-endian)",
                      offset);
  }
  offset += 4;
  const std::uint32_t rank = detail::get_u32(in, offset, "rank");
  if (rank > kFantMaxRank) detail::malformed("rank " + std::to_string(rank) + " too large", offset - 4);
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    d = detail::get_u32(in, offset, "dimension");
    count *= d;
    if (count > (std::uint64_t{1} << 32)) detail::malformed("tensor too large", offset - 4);
  }
  std::vector<double> values(static_cast<std::size_t>(count));
  for (auto& v : values) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) detail::malformed("truncated payload", offset);
    offset += 8;
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    v = std::bit_cast<double>(bits);
  }
  return Tensor(std::move(shape), std::move(values));
}

inline void save_fant(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_fant(out, t);
}

inline Tensor load_fant(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return read_fant(in);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace fanfreq::io
