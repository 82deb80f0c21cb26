#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace nng {

/// Seeded pseudo-random stream. Every stochastic routine takes one of these
/// by reference; there is no global generator.
///
/// split() derives an independent child stream deterministically from the
/// parent seed and a per-parent counter, so a sequence of split() calls made
/// in the same order always yields the same children regardless of how many
/// draws the parent has made in between.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const { return seed_; }

    double normal();
    double uniform();
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);
    /// Gamma(shape, rate), mean shape / rate.
    double gamma(double shape, double rate);

    Rng split();

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::uint64_t children_ = 0;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace nng
