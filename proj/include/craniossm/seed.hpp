#pragma once

#include <cstdint>
#include <string_view>

namespace craniossm {

/// Stable per-item seed: FNV-1a over the key, mixed with the root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view key) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : key) {
        h ^= c;
        h *= 1099511628211ull;
    }
    // splitmix64 finalizer over the combination.
    std::uint64_t z = h ^ (root + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace craniossm
