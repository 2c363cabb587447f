#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ssng {

// SplitMix64 finalizer. Used to derive independent stream seeds from a run seed
// and a tuple of coordinates (epoch, sample index, view, ...), so a stream does
// not depend on the order in which samples are visited.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> coords) {
  uint64_t h = mix64(seed);
  for (auto c : coords) h = mix64(h ^ mix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed, std::initializer_list<uint64_t> coords) {
  return Rng(derive_seed(seed, coords));
}

// Uniform double in [0, 1) from 53 random bits; identical across standard libraries,
// unlike std::uniform_real_distribution.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Integer in [lo, hi] inclusive, unbiased by rejection.
inline int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) {
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return lo + static_cast<int64_t>(r % span);
}

// Fisher-Yates with uniform_int, portable across standard libraries.
template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<int64_t>(last - first);
  for (int64_t i = n - 1; i > 0; --i) {
    auto j = uniform_int(rng, 0, i);
    std::iter_swap(first + i, first + j);
  }
}

}  // namespace ssng
