#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace privtranslate {

constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives a stage- or component-specific seed from one top-level seed so
/// every stage can be re-run independently with the same stream.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
  return splitmix64(base ^ fnv1a64(label));
}

inline uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index) {
  return splitmix64(derive_seed(base, label) ^ splitmix64(index + 0x51ed2701ull));
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace privtranslate
