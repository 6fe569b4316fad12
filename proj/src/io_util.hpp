#pragma once

// Little-endian binary IO helpers shared by the checkpoint and dataset formats.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "tctrans/common.hpp"

namespace tct::io {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline void read_exact(std::istream& is, void* dst, size_t n, const char* what) {
  is.read(static_cast<char*>(dst), std::streamsize(n));
  if (size_t(is.gcount()) != n) {
    throw DataError(std::string("truncated file while reading ") + what);
  }
}

inline uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, b, 4, what);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

inline float get_f32(std::istream& is, const char* what) {
  uint32_t bits = get_u32(is, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void put_magic(std::ostream& os, const char magic[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[5], const char* what) {
  char buf[4];
  read_exact(is, buf, 4, what);
  if (std::memcmp(buf, magic, 4) != 0) {
    throw DataError(std::string("bad magic in ") + what + " (expected " + magic + ")");
  }
}

}  // namespace tct::io
