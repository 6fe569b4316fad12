#include "tctrans/common.hpp"

namespace tct {

void require_binary(const Plane& p, const std::string& what) {
  for (float x : p.v) {
    if (x != 0.0f && x != 1.0f) {
      throw DataError(what + " must be strictly binary (found " + std::to_string(x) + ")");
    }
  }
}

Plane downsample_nearest(const Plane& p, int factor) {
  if (factor < 1) throw ConfigError("downsample_nearest: factor must be >= 1");
  if (p.h % factor != 0 || p.w % factor != 0) {
    throw ShapeError("downsample_nearest: plane " + std::to_string(p.h) + "x" +
                     std::to_string(p.w) + " not divisible by " + std::to_string(factor));
  }
  Plane out(p.h / factor, p.w / factor);
  for (int r = 0; r < out.h; ++r) {
    for (int c = 0; c < out.w; ++c) {
      out.at(r, c) = p.at(r * factor, c * factor);
    }
  }
  return out;
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace tct
