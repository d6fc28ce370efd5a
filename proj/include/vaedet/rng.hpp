// Deterministic random number generation for training, scoring and data
// synthesis. Everything downstream (weight init, reparameterization draws,
// shuffles, synthetic corpora) derives from these streams, so the generator
// is hand-rolled: no dependence on libstdc++ distribution internals.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace vaedet {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Mixes a stream tag into a base seed. Used to derive independent
// substreams (init / shuffle / eps / per-image) from one run seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    uint64_t s = seed ^ (0x6a09e667f3bcc909ull + tag * 0x9e3779b97f4a7c15ull);
    return splitmix64(s);
}

// xoshiro256** with splitmix64 seeding.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n). n must be positive.
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller. Stateless between calls: both uniforms
    // are drawn fresh and the sine branch is discarded, so a draw sequence
    // depends only on the engine state.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> state_{};
};

// Fisher-Yates shuffle driven by the engine above.
template <typename Container>
void shuffle(Container& items, Rng& rng) {
    const int64_t n = static_cast<int64_t>(items.size());
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(i + 1);
        std::swap(items[static_cast<size_t>(i)], items[static_cast<size_t>(j)]);
    }
}

}  // namespace vaedet
