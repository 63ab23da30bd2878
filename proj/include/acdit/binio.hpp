#pragma once

// Little-endian binary stream helpers shared by the checkpoint and dataset
// file formats.

#include <cstdint>
#include <istream>
#include <ostream>

#include "acdit/common.hpp"

namespace acdit::detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw FormatError("binary write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw FormatError("truncated file");
}

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
  write_bytes(os, buf, sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  read_bytes(is, buf, sizeof(U));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return static_cast<U>(v);
}

inline void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_le<uint64_t>(os, bits);
}

inline double read_f64(std::istream& is) {
  uint64_t bits = read_le<uint64_t>(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_le<uint32_t>(os, bits);
}

inline float read_f32(std::istream& is) {
  uint32_t bits = read_le<uint32_t>(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_le<uint32_t>(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline std::string read_str(std::istream& is) {
  uint32_t n = read_le<uint32_t>(is);
  std::string s(n, '\0');
  read_bytes(is, s.data(), n);
  return s;
}

}  // namespace acdit::detail
