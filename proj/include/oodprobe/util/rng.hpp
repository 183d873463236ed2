#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

namespace oodprobe {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Child seed for a named sub-stream, e.g. derive_seed(seed, {env, 7}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = splitmix64(base);
  for (auto t : tags) s = splitmix64(s ^ splitmix64(t + 0x632BE59BD9B4E019ull));
  return s;
}

/// Uniform double in [0, 1) with 53 random bits; independent of the standard
/// library's distribution implementations.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Unbiased integer in [0, n).
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return r % n;
}

inline bool bernoulli(std::mt19937_64& rng, double p) { return uniform01(rng) < p; }

/// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
  return p;
}

}  // namespace oodprobe
