#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace malunet {

// Error taxonomy. The CLI maps these onto its exit codes:
// ShapeError/ConfigError/IoError -> 2 (validation), NumericError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

// All randomness flows from one master seed through named sub-streams so that
// adding a consumer never perturbs the draws of another.
inline std::uint64_t substream_seed(std::uint64_t master, std::string_view name) {
    // FNV-1a over the stream name, folded into the master seed, then mixed
    // (splitmix64 finalizer).
    std::uint64_t h = 14695981039346656037ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    std::uint64_t z = master + 0x9e3779b97f4a7c15ull + h;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::mt19937_64 substream(std::uint64_t master, std::string_view name) {
    return std::mt19937_64(substream_seed(master, name));
}

// Uniform double in [0,1) from raw engine bits; identical across standard
// library implementations, unlike std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform in [lo, hi).
inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

// Uniform integer in [0, n).
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
    // Rejection-free modulo bias is negligible for the small n used here,
    // but do it properly anyway.
    const std::uint64_t limit = std::mt19937_64::max() - std::mt19937_64::max() % n;
    std::uint64_t v = rng();
    while (v >= limit) v = rng();
    return v % n;
}

}  // namespace malunet
