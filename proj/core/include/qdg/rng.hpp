#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace qdg {

// splitmix64 finalizer; decorrelates derived seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic sub-seed for a named stream, e.g. derive_seed(seed, "split").
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
    return mix64(base ^ fnv1a64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
    return mix64(derive_seed(base, tag) ^ mix64(index));
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace qdg
