#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "uq/tensor.hpp"

namespace uq {

/// FNV-1a over raw bytes; used for config-addressed run directories and
/// content digests (base-weight freeze checks, optimizer state stamps).
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

/// Digest of a tensor list: shapes then raw IEEE bytes, order-sensitive.
inline std::uint64_t digest_tensors(const std::vector<const Tensor*>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* t : tensors) {
    for (std::size_t dim : t->shape()) {
      h = fnv1a64(&dim, sizeof(dim), h);
    }
    h = fnv1a64(t->data(), t->size() * sizeof(double), h);
  }
  return h;
}

/// First 12 hex digits (high 48 bits) of a 64-bit digest.
inline std::string hex12(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string out(12, '0');
  for (std::size_t i = 0; i < 12; ++i) {
    out[i] = digits[(h >> (60 - 4 * i)) & 0xF];
  }
  return out;
}

}  // namespace uq
