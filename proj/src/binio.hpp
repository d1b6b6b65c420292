// SPDX-License-Identifier: Apache-2.0
// Little-endian binary helpers shared by the on-disk formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace amn::binio {

inline void put_u32(std::ostream &os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char *>(b), 4);
}

inline void put_u16(std::ostream &os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char *>(b), 2);
}

inline void put_f32(std::ostream &os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void get_bytes(std::istream &is, void *dst, std::size_t n, const char *what) {
  is.read(static_cast<char *>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw std::runtime_error(std::string("truncated file while reading ") + what);
}

inline std::uint32_t get_u32(std::istream &is, const char *what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint16_t get_u16(std::istream &is, const char *what) {
  unsigned char b[2];
  get_bytes(is, b, 2, what);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline float get_f32(std::istream &is, const char *what) {
  return std::bit_cast<float>(get_u32(is, what));
}

} // namespace amn::binio
