// Deterministic random number generation (xoshiro256** + splitmix64 seeding).
// Distributions are implemented from raw bits so streams are bit-stable across
// platforms and compilers, which the reproducibility contract depends on.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace asvc {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
    }

    uint64_t u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range [lo, hi].
    int range_int(int lo, int hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(u64() % span);
    }

    // Standard normal via Box-Muller on our own uniforms.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Independent substream for a fixed role. The same (seed, tag) pair always
    // yields the same stream, so e.g. utterance (i, j) can be regenerated
    // without replaying the whole corpus.
    static Rng fork(uint64_t seed, uint64_t tag) {
        uint64_t sm = seed ^ (0x632be59bd9b4e019ULL * (tag + 1));
        uint64_t mixed = splitmix64(sm);
        return Rng(mixed ^ splitmix64(sm));
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4] = {};
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Fixed stream tags, split from the one run-level seed in this order.
enum class Stream : uint64_t {
    kCorpus = 1,
    kInit = 2,
    kChunk = 3,
    kDropout = 4,
    kTrainOrder = 5,
};

inline Rng stream_rng(uint64_t seed, Stream which) {
    return Rng::fork(seed, static_cast<uint64_t>(which));
}

}  // namespace asvc
