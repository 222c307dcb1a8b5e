#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mqmk::rng {

// splitmix64 finalizer; used to derive independent sub-seeds so that
// per-class / per-task generators can be created in any order.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(base ^ 0x6a09e667f3bcc908ULL) + splitmix64(a) * 3 + b);
}

using Engine = std::mt19937_64;

// [0, 1). Derived from the raw 64-bit draw instead of
// std::uniform_real_distribution so the value stream is pinned by the
// standard-mandated mt19937_64 sequence alone.
inline double uniform_unit(Engine& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double uniform_range(Engine& g, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(g);
}

// Basic Box-Muller; two draws per sample, no cached second value.
inline double gaussian(Engine& g) {
  double u1 = uniform_unit(g);
  double u2 = uniform_unit(g);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace mqmk::rng
