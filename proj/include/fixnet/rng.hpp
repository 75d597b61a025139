// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace fixnet {

/// Deterministic RNG helpers. Distributions are hand-rolled so results are
/// identical across standard library implementations.
struct Rng {
    std::mt19937_64 engine;

    explicit Rng(uint64_t seed) : engine(seed) {}

    /// Uniform in [0, 1).
    double uniform() {
        return double(engine() >> 11) * 0x1p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps this unbiased.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = engine();
        while (x >= limit) x = engine();
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[size_t(below(i))]);
    }
};

/// splitmix64; used to derive independent stream seeds from (seed, tags).
inline uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t x = a * 0x9E3779B97F4A7C15ull + b * 0xBF58476D1CE4E5B9ull + c * 0x94D049BB133111EBull + 0x2545F4914F6CDD1Dull;
    x ^= x >> 30; x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27; x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

}  // namespace fixnet
