#pragma once

#include <cstdint>
#include <random>

namespace smkd {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; derives independent stream seeds from (seed, a, b).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t z = seed;
  for (std::uint64_t v : {a, b}) {
    z += 0x9e3779b97f4a7c15ULL + v * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
  }
  return z;
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Normal(0, std) resampled until it lies within two standard deviations.
inline double truncated_normal(Rng& rng, double std) {
  std::normal_distribution<double> n(0.0, 1.0);
  double v;
  do {
    v = n(rng);
  } while (v < -2.0 || v > 2.0);
  return v * std;
}

}  // namespace smkd
