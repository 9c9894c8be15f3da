#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace nsbert {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Independent stream seed for one purpose ("mask", "dropout", "shuffle", ...)
/// so that streams never interfere regardless of consumption order.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(master ^ fnv1a(purpose));
  h = splitmix64(h ^ a);
  return splitmix64(h ^ (b * 0x9e3779b97f4a7c15ULL));
}

}  // namespace nsbert
