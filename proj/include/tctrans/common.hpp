#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tct {

// Error hierarchy. The CLI maps these onto distinct exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration, flags, or API preconditions.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Shape or dimension mismatch between tensors/planes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Bad files: wrong magic, truncation, integrity failures, unsatisfiable data.
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Non-finite values, degenerate statistics, diverged training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// A single-channel float image plane, row-major.
struct Plane {
  int h = 0;
  int w = 0;
  std::vector<float> v;

  Plane() = default;
  Plane(int h_, int w_, float fill = 0.0f) : h(h_), w(w_), v(size_t(h_) * w_, fill) {}

  float& at(int r, int c) { return v[size_t(r) * w + c]; }
  float at(int r, int c) const { return v[size_t(r) * w + c]; }
  size_t size() const { return v.size(); }
  bool same_size(const Plane& o) const { return h == o.h && w == o.w; }
};

// Throws DataError unless every pixel is exactly 0 or 1.
void require_binary(const Plane& p, const std::string& what);

// Nearest-neighbor downsample by an integer factor (top-left rule:
// out(i,j) = in(i*f, j*f)), the inverse of 2x nearest upsampling.
Plane downsample_nearest(const Plane& p, int factor);

// FNV-1a 64-bit, used for dataset checksums.
uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 1469598103934665603ull);

}  // namespace tct
