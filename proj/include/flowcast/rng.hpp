#pragma once

// Seeded random number generation with a pinned algorithm, so that sampled
// initial states are reproducible across toolchains and library versions.
// Uniforms come from SplitMix64; Gaussians from the Box-Muller transform.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

#include "flowcast/core.hpp"

namespace flowcast {

/// SplitMix64 (Steele, Lea, Flood 2014). State advances by the golden-ratio
/// increment; output is the finalized mix of the new state.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

private:
    std::uint64_t state_;
};

/// Standard-normal stream over a SplitMix64 source. Box-Muller produces
/// values in pairs; the second of each pair is cached.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // 1 - u is in (0, 1], keeping the log argument strictly positive.
        const double u1 = 1.0 - rng_.uniform01();
        const double u2 = rng_.uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    SplitMix64 rng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// x0 ~ N(mean, stddev^2 I), drawn coordinate by coordinate.
inline StateVector sample_gaussian_state(std::uint64_t seed, int dim,
                                         const StateVector& mean, double stddev) {
    if (dim < 1) throw std::invalid_argument("sample_gaussian_state: dim must be >= 1");
    if (mean.size() != static_cast<std::size_t>(dim)) {
        throw std::invalid_argument("sample_gaussian_state: mean dimension mismatch");
    }
    if (!(stddev >= 0.0)) {
        throw std::invalid_argument("sample_gaussian_state: stddev must be >= 0");
    }
    GaussianStream g(seed);
    StateVector x(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i) {
        x[static_cast<std::size_t>(i)] = mean[static_cast<std::size_t>(i)] + stddev * g.next();
    }
    return x;
}

}  // namespace flowcast
