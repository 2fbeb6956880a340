#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace pfr {

// Deterministic seeded stream. mt19937_64 output is pinned by the standard and
// every distribution below is hand-rolled, so the same seed gives the same
// sequence on every platform. std::*_distribution is deliberately avoided
// (implementation-defined sequences).
class RandomStream {
public:
    explicit RandomStream(uint64_t seed) : base_seed_(seed), engine_(mix(seed)) {}

    RandomStream(uint64_t seed, uint64_t stream_index)
        : RandomStream(mix(seed) + 0x9e3779b97f4a7c15ULL * (stream_index + 1)) {}

    // Independent stream derived from this stream's seed; used for per-worker
    // and per-stage streams that must not perturb the parent sequence.
    RandomStream child(uint64_t index) const {
        return RandomStream(base_seed_, index);
    }

    uint64_t seed() const { return base_seed_; }

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(engine_()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; consumes two uniforms per pair.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // Guard against log(0).
        if (u1 <= 0.0) {
            u1 = 0x1.0p-53;
        }
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    // splitmix64 finalizer; decorrelates nearby seeds.
    static uint64_t mix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    uint64_t base_seed_ = 0;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace pfr
