#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace widthlab {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based seed derivation: the child seed depends only on the parent
// and the tags, never on how many other streams were derived before it.
constexpr std::uint64_t derive_seed(std::uint64_t parent,
                                    std::initializer_list<std::uint64_t> tags) {
  std::uint64_t s = mix64(parent);
  for (std::uint64_t t : tags) s = mix64(s ^ mix64(t + 0x632be59bd9b4e019ULL));
  return s;
}

// Stream tags.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kMask = 2;
inline constexpr std::uint64_t kShuffle = 3;
inline constexpr std::uint64_t kSubsample = 4;
inline constexpr std::uint64_t kHeads = 5;
inline constexpr std::uint64_t kPower = 6;
inline constexpr std::uint64_t kJoint = 7;
inline constexpr std::uint64_t kReseed = 8;
inline constexpr std::uint64_t kSynthetic = 9;
}  // namespace stream

// Uniform double in [0, 1) from the top 53 bits; unlike
// std::uniform_real_distribution this is identical across standard libraries.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Box-Muller; one variate per call keeps the stream position obvious.
double standard_normal(Rng& rng);

}  // namespace widthlab
