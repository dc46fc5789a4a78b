#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace upmad {

/// SplitMix64 finalizer. Used both to derive child seeds and as a
/// counter-based generator (hash of seed and element index).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Derives a child seed from a parent seed and a path of stream ids, so that
/// every stochastic component of a run hangs off one root seed.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(parent);
  for (auto p : path) s = mix64(s ^ mix64(p + 0x632BE59BD9B4E019ull));
  return s;
}

/// Uniform in [0, 1) as a pure function of (seed, index).
inline double counter_uniform(std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t bits = mix64(seed ^ mix64(index));
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

}  // namespace upmad
