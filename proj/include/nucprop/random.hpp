#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace nucprop {

// SplitMix64 finaliser; used to derive independent stream seeds from
// (seed, counter) so per-frame / per-pixel work is order-independent.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter = 0) noexcept {
    return splitmix64(splitmix64(seed ^ splitmix64(stream)) + counter);
}

// Stream tags for derive_seed.
namespace streams {
inline constexpr std::uint64_t placement = 1;
inline constexpr std::uint64_t motion = 2;
inline constexpr std::uint64_t noise = 3;
inline constexpr std::uint64_t degrade = 4;
inline constexpr std::uint64_t jitter = 5;
inline constexpr std::uint64_t loss = 6;
inline constexpr std::uint64_t score = 7;
}  // namespace streams

// std::mt19937_64 is fully specified by the standard, but the std
// distributions are not. The conversions below are written out so seeded
// output is identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(static_cast<double>(span) * uniform());
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, one value per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace nucprop
