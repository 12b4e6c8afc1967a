#pragma once

#include <cstdint>
#include <cmath>
#include <random>

namespace mdfi {

// Deterministic random source. std::mt19937_64 output is pinned by the
// standard, but the <random> distributions are not; the draw functions
// here are written out explicitly so seeded results are stable across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t bits() { return engine_(); }

    // uniform in [0,1) with 53-bit resolution
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call, the paired value is discarded
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // integer in [0, n)
    std::uint64_t index(std::uint64_t n) {
        return n == 0 ? 0 : engine_() % n;
    }

    // splitmix64 mix, used to derive independent per-item seeds
    static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
};

} // namespace mdfi
