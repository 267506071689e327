#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace promptmed {

/// 64-bit FNV-1a. Used for cheap state fingerprints (frozen-weight checks,
/// pipeline stage hashes); not a cryptographic digest.
class Fnv1a {
 public:
  Fnv1a& update(const void* data, std::size_t n);
  template <class T>
  Fnv1a& update(std::span<const T> s) { return update(s.data(), s.size_bytes()); }
  template <class T>
  Fnv1a& update(const std::vector<T>& v) { return update(v.data(), v.size() * sizeof(T)); }
  Fnv1a& update(std::string_view s) { return update(s.data(), s.size()); }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);
/// SHA-256 hex digest, used for content-addressed storage.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace promptmed
