#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lmc {

// splitmix64 step; used to derive independent sub-seeds.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(a ^ mix64(b)); }

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t mix64(uint64_t seed, std::string_view tag) { return mix64(seed, fnv1a(tag)); }

template <typename... Rest>
uint64_t mix64(uint64_t a, uint64_t b, uint64_t c, Rest... rest) {
    return mix64(mix64(a, b), c, static_cast<uint64_t>(rest)...);
}

template <typename... Rest>
uint64_t mix64(uint64_t seed, std::string_view tag, uint64_t x, Rest... rest) {
    return mix64(mix64(seed, tag), x, static_cast<uint64_t>(rest)...);
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace lmc
