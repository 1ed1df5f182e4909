// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace renofeat {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a list of keys
/// (splitmix64 finalizer chained over the keys). Streams keyed by an index
/// are stable no matter in which order the indices are visited.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (std::uint64_t k : keys) h = mix(h ^ mix(k));
  return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> keys = {}) {
  return Rng(derive_seed(base, keys));
}

/// Stream tags so unrelated consumers of one seed never share a stream.
enum class Stream : std::uint64_t {
  kInit = 1,
  kHeadInit,
  kShuffle,
  kDropout,
  kAdversarialMix,
  kAttackTarget,
  kSubsample,
  kRender,
  kClassCatalog,
  kGridCell,
  kProbe,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

}  // namespace renofeat
