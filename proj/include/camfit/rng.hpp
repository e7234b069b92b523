#pragma once

// Deterministic random number generation. Everything that draws randomness
// (init, shuffles, augmentations, synthetic data) goes through these types so
// runs replay bit-for-bit across platforms and across checkpoint resume.
//
// Two pieces:
//  - Rng: xoshiro256** stream with hand-rolled uniform/normal/shuffle, because
//    the std <random> distributions are implementation-defined.
//  - stream_seed(): SplitMix64-based key derivation. The trainer never stores
//    RNG state; it derives a fresh stream from (seed, epoch, step, sample,
//    purpose) wherever randomness is needed, which makes resume trivial.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

#include "camfit/common.hpp"

namespace camfit {

namespace detail {
inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
inline uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }
}  // namespace detail

// Derive an independent stream key from a base seed plus arbitrary indices.
// Mixing is sequential SplitMix64 absorption, so (1, 2) and (2, 1) differ.
inline uint64_t stream_seed(uint64_t base, std::initializer_list<uint64_t> indices) {
    uint64_t x = base;
    (void)detail::splitmix64(x);
    for (uint64_t idx : indices) {
        x ^= idx + 0x9e3779b97f4a7c15ULL;
        (void)detail::splitmix64(x);
    }
    return x;
}

class Rng {
  public:
    explicit Rng(uint64_t seed) {
        // Seed the 256-bit state from SplitMix64 as recommended upstream.
        uint64_t x = seed;
        for (auto& w : s_) w = detail::splitmix64(x);
    }

    uint64_t next_u64() {
        // xoshiro256**
        const uint64_t result = detail::rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl(s_[3], 45);
        return result;
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range via rejection-free Lemire-style mapping is
    // overkill here; modulo bias at 64 bits over our tiny ranges is far below
    // anything observable, but rejection keeps it exact anyway.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        CAMFIT_CHECK(lo <= hi, ArgumentError, "uniform_int: empty range");
        const uint64_t span = uint64_t(hi - lo) + 1;
        if (span == 0) return int64_t(next_u64());  // full 64-bit range
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return lo + int64_t(v % span);
    }

    // Standard normal via Box-Muller. No cached spare: two uniforms per draw
    // keeps the draw count per call fixed, which replay tests rely on.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates with our own integer draws (std::shuffle is
    // implementation-defined in how it consumes the generator).
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
            const int64_t j = uniform_int(0, i);
            std::swap(v[size_t(i)], v[size_t(j)]);
        }
    }

    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(size_t(n), 0);
        for (int64_t i = 0; i < n; ++i) p[size_t(i)] = i;
        shuffle(p);
        return p;
    }

  private:
    std::array<uint64_t, 4> s_{};
};

}  // namespace camfit
