#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace mhl {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a root seed and a tuple of keys
/// (e.g. {user, epoch, purpose}). Order of keys matters.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = splitmix64(root);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
  return Rng(derive_seed(root, keys));
}

/// Uniform double in [0, 1) built from 53 random bits. Used instead of
/// std::uniform_real_distribution whose output is implementation-defined.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [lo, hi] (inclusive), via rejection sampling so the
/// result does not depend on the standard library's distribution code.
inline std::uint64_t uniform_int(Rng& rng, std::uint64_t lo, std::uint64_t hi) {
  const std::uint64_t span = hi - lo;
  if (span == ~std::uint64_t{0}) return rng();
  const std::uint64_t n = span + 1;
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return lo + r % n;
}

/// Standard normal via Box-Muller (portable across standard libraries).
inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

// Purpose tags for derive_seed.
namespace stream {
inline constexpr std::uint64_t kShuffle = 1;
inline constexpr std::uint64_t kMask = 2;
inline constexpr std::uint64_t kDropout = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kFallback = 5;
inline constexpr std::uint64_t kSynth = 6;
inline constexpr std::uint64_t kKMeans = 7;
}  // namespace stream

}  // namespace mhl
