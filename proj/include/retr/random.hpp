#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace retr {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent seed for one purpose ("shuffle", "negatives", ...) derived from
/// a master seed, optionally further split by an index such as a user id.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : purpose) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(master ^ h) + index);
}

inline Rng make_stream(std::uint64_t master, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(master, purpose, index));
}

/// Uniform draw from the open interval (0, 1).
inline double open_uniform(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double v = u(rng);
  while (v <= 0.0) v = u(rng);
  return v;
}

}  // namespace retr
