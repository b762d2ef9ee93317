#pragma once

// SGT tensor files: "SGT1", u8 dtype (0 = f32), u8 rank, rank x u64 LE extents,
// row-major LE f32 payload.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sgp/error.hpp"
#include "sgp/tensor.hpp"

namespace sgp {

namespace detail {

static_assert(std::endian::native == std::endian::little, "SGT I/O assumes a little-endian host");

inline void write_all(std::ofstream& os, const void* p, std::size_t n, const std::string& path) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
  if (!os) throw IoError("failed writing " + path);
}

inline void read_all(std::ifstream& is, void* p, std::size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (!is) throw IoError("truncated SGT file " + path);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_sgt(const Shape& dims, std::span<const float> data) {
  if (dims.size() > 255) throw ContractError("SGT rank must fit in a byte");
  std::vector<std::uint8_t> out{'S', 'G', 'T', '1', 0, std::uint8_t(dims.size())};
  for (auto e : dims) {
    std::uint64_t v = e;
    auto* b = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), b, b + 8);
  }
  auto* b = reinterpret_cast<const std::uint8_t*>(data.data());
  out.insert(out.end(), b, b + data.size() * sizeof(float));
  return out;
}

// Writes through a temporary file and renames it into place.
inline void write_bytes_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    detail::write_all(os, bytes.data(), bytes.size(), tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

template <typename T>
void write_sgt(const std::filesystem::path& path, const Tensor<T>& t) {
  std::vector<float> f(t.data().begin(), t.data().end());
  write_bytes_atomic(path, encode_sgt(t.dims(), f));
}

template <typename T = float>
Tensor<T> read_sgt(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + p);
  std::array<char, 4> magic{};
  detail::read_all(is, magic.data(), 4, p);
  if (std::memcmp(magic.data(), "SGT1", 4) != 0) throw IoError("bad SGT magic in " + p);
  std::uint8_t hdr[2];
  detail::read_all(is, hdr, 2, p);
  if (hdr[0] != 0) throw IoError("unsupported SGT dtype " + std::to_string(hdr[0]) + " in " + p);
  Shape dims(hdr[1]);
  for (auto& e : dims) {
    std::uint64_t v = 0;
    detail::read_all(is, &v, 8, p);
    e = std::size_t(v);
  }
  std::vector<float> f(sgp::numel(dims));
  detail::read_all(is, f.data(), f.size() * sizeof(float), p);
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in SGT file " + p);
  return Tensor<T>(dims, std::vector<T>(f.begin(), f.end()));
}

}  // namespace sgp
