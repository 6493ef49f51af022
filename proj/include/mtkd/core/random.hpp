#pragma once

#include <cstdint>
#include <random>

namespace mtkd {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a stream id (splitmix64 finaliser).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Named streams so that e.g. projector initialisation never perturbs student initialisation.
namespace stream {
inline constexpr std::uint64_t model_init = 1;
inline constexpr std::uint64_t projector_init = 2;
inline constexpr std::uint64_t shuffle = 3;
inline constexpr std::uint64_t subsample = 4;
inline constexpr std::uint64_t split = 5;
inline constexpr std::uint64_t synthetic = 6;
} // namespace stream

} // namespace mtkd
