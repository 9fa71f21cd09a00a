#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "relmatch/errors.hpp"

namespace relmatch {

// xoshiro256** with splitmix64 seeding. Implemented here rather than taken
// from <random> because the whole harness promises bit-identical replay:
// the four-word state round-trips through checkpoints, and the sampling
// helpers below are fixed algorithms instead of implementation-defined
// std:: distributions.
class Rng {
public:
    using State = std::array<std::uint64_t, 4>;

    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform index in [0, n). Rejection-sampled so every index is exactly
    // equally likely.
    std::size_t uniform_index(std::size_t n) {
        if (n == 0) throw Error("uniform_index: empty range");
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<std::size_t>(v % bound);
    }

    // Standard normal via Box-Muller. No cached spare: one draw costs two
    // uniforms, which keeps the state trajectory a pure function of the
    // call sequence.
    double gaussian() {
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    // Derive an independent stream (dataset vs. batch vs. triplet sampling).
    Rng fork(std::uint64_t stream_id) {
        Rng child(next_u64() ^ (0x6c62272e07bb0142ULL + stream_id));
        return child;
    }

    // k distinct indices from [0, n), order random (partial Fisher-Yates).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw Error("sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + uniform_index(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

    const State& state() const { return state_; }
    void set_state(const State& s) { state_ = s; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    State state_{};
};

}  // namespace relmatch
