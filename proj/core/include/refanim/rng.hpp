#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace refanim {

// Deterministic, platform-independent RNG. std::mt19937_64 is portable but the
// standard distributions are not, so sampling helpers are implemented here.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform integer in [lo, hi], inclusive. Rejection sampling, unbiased.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        if (range == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
        uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % range);
    }

    // Uniform real in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. One value per call, cached pair.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

// Derives an independent stream seed from a base seed and a list of tags.
// Used so that e.g. per-shot and per-frame randomness never aliases.
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> tags) {
    uint64_t h = base ^ 0x6a09e667f3bcc909ULL;
    for (uint64_t t : tags) {
        h ^= t + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        Rng mix(h);
        h = mix.next_u64();
    }
    return h;
}

}  // namespace refanim
