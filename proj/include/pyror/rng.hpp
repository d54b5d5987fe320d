#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pyror {

/// splitmix64 finalizer; used to derive independent seed streams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t stream) {
  return std::mt19937_64(mix64(seed ^ mix64(stream)));
}

/// Uniform in [0,1) from the raw 64-bit output; identical on every
/// platform, unlike the library distribution adapters.
inline double next_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller (one value per call, pairs drawn fresh).
inline double next_normal(std::mt19937_64& rng) {
  double u1 = next_uniform(rng);
  while (u1 <= 0.0) u1 = next_uniform(rng);
  const double u2 = next_uniform(rng);
  const double r = std::sqrt(-2.0 * std::log(u1));
  return r * std::cos(6.283185307179586476925286766559 * u2);
}

}  // namespace pyror
