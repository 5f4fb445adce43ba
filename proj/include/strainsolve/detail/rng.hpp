#pragma once

#include <cstdint>
#include <random>

namespace strainsolve::detail {

// splitmix64, used to whiten user seeds and to derive independent
// per-task streams (trial t of a run seeded with s gets mix(s, t)).
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = base;
  std::uint64_t h = splitmix64(s);
  s ^= a + 0x9e3779b97f4a7c15ULL;
  h ^= splitmix64(s);
  s ^= b + 0xc2b2ae3d27d4eb4fULL;
  h ^= splitmix64(s);
  s ^= c + 0x165667b19e3779f9ULL;
  h ^= splitmix64(s);
  return h;
}

inline std::mt19937_64 make_engine(std::uint64_t seed) {
  std::uint64_t s = seed;
  return std::mt19937_64(splitmix64(s));
}

}  // namespace strainsolve::detail
