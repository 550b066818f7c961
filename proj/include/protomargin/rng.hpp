#pragma once

// Seeded randomness. Every random draw in the project flows from one master
// seed through named sub-streams, so any component (data, init, batching,
// bootstrap) can be reproduced in isolation. All helpers are written against
// std::mt19937_64's standard-specified bit stream; none rely on
// std::*_distribution, whose output is implementation-defined.

#include <cstdint>
#include <random>
#include <string_view>

namespace protomargin {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

using Rng = std::mt19937_64;

/// Derives independent deterministic generators from one master seed.
/// stream("data") always yields the same generator for the same master seed;
/// stream("data", i) gives a per-item generator within that stream.
class SeedStreams {
public:
    explicit SeedStreams(std::uint64_t master) : master_(master) {}

    std::uint64_t master() const { return master_; }

    std::uint64_t stream_seed(std::string_view name, std::uint64_t index = 0) const {
        return splitmix64(splitmix64(master_ ^ fnv1a64(name)) + index);
    }

    Rng stream(std::string_view name, std::uint64_t index = 0) const {
        return Rng(stream_seed(name, index));
    }

private:
    std::uint64_t master_;
};

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform_double(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform double in [lo, hi).
inline double uniform_double(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform_double(rng);
}

/// Unbiased uniform integer in [0, n). n must be positive.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % n;
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
    return lo + static_cast<int>(uniform_index(
                    rng, static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
}

inline bool bernoulli(Rng& rng, double p) {
    return uniform_double(rng) < p;
}

/// Standard normal via Box-Muller (one value per call, second discarded:
/// simplicity beats the saved log()).
inline double normal_double(Rng& rng) {
    double u1 = uniform_double(rng);
    while (u1 <= 0.0) u1 = uniform_double(rng);
    const double u2 = uniform_double(rng);
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

}  // namespace protomargin
