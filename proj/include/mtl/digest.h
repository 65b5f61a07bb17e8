#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mtl/tensor.h"

namespace mtl {

// FNV-1a 64-bit over raw bytes. Used for tensor content digests and
// freeze-set verification.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 1469598103934665603ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* d = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = d[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Bit-level digest of a tensor's double payload.
inline std::string tensor_digest(const Tensor& t) {
  uint64_t h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int64_t));
  h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
  return hex64(h);
}

inline std::string bytes_digest(const std::vector<unsigned char>& b) {
  return hex64(fnv1a64(b.data(), b.size()));
}

inline std::string string_digest(const std::string& s) {
  return hex64(fnv1a64(s.data(), s.size()));
}

}  // namespace mtl
