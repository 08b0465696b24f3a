#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hashmoe {

// splitmix64 finalizer. Exact constants are part of the routing-table wire
// contract; do not change.
inline uint64_t mix64(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// uniform double in [0,1) from the top 53 bits, identical on every platform
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// FNV-1a over raw bytes, used for vocab digests
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string to_hex(uint64_t v);
uint64_t from_hex(const std::string& s);

// Intra-op parallelism cap. HASHMOE_THREADS=1 selects fully deterministic
// mode; any fixed value is reproducible run to run.
int max_threads();
// Applies max_threads() to Eigen and OpenMP. Safe to call repeatedly.
void init_threads();

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace hashmoe
