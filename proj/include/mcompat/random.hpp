#pragma once

#include <cstdint>

namespace mcompat::detail {

// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Uniform double in [0, 1) from the top 53 bits; portable across standard libraries.
template <class Rng>
double uniform01(Rng& rng) {
  return double(rng() >> 11) * 0x1.0p-53;
}

}  // namespace mcompat::detail
