#pragma once

// Little-endian primitives shared by the binary file formats.

#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "grouptr/errors.hpp"

namespace grouptr::binary {

inline void put_uint(std::ostream& out, std::uint64_t v, int bytes) {
  std::array<char, 8> b{};
  for (int i = 0; i < bytes; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), bytes);
}

inline void put_u8(std::ostream& out, std::uint8_t v) { put_uint(out, v, 1); }
inline void put_u16(std::ostream& out, std::uint16_t v) { put_uint(out, v, 2); }
inline void put_u32(std::ostream& out, std::uint32_t v) { put_uint(out, v, 4); }

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

// `file` names the format in truncation errors, e.g. "feature file".
inline std::uint64_t get_uint(std::istream& in, int bytes, const char* file, const char* what) {
  std::array<unsigned char, 8> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), bytes)) {
    throw ValidationError(std::string(file) + " truncated while reading " + what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint8_t get_u8(std::istream& in, const char* file, const char* what) {
  return static_cast<std::uint8_t>(get_uint(in, 1, file, what));
}
inline std::uint16_t get_u16(std::istream& in, const char* file, const char* what) {
  return static_cast<std::uint16_t>(get_uint(in, 2, file, what));
}
inline std::uint32_t get_u32(std::istream& in, const char* file, const char* what) {
  return static_cast<std::uint32_t>(get_uint(in, 4, file, what));
}

inline float get_f32(std::istream& in, const char* file, const char* what) {
  const std::uint32_t bits = get_u32(in, file, what);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace grouptr::binary
