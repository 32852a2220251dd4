// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random numbers. A generator is identified by (key, counter);
// the i-th draw is a pure function of the key and i, so any stream can be
// replayed or forked without touching other streams.
#pragma once

#include <cstdint>
#include <limits>

namespace himar {

/// Named stream identifiers. Each component draws from its own stream so
/// that changing one consumer never shifts another's sequence.
enum class Stream : std::uint64_t {
    init = 1,
    data = 2,
    mask = 3,
    noise = 4,
    cfg = 5,
    eval = 6,
    synth = 7,
};

class Rng {
   public:
    using result_type = std::uint64_t;

    Rng() : Rng(0, Stream::init) {}
    Rng(std::uint64_t seed, Stream stream);

    /// Independent child stream keyed by `id`.
    Rng fork(std::uint64_t id) const;

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform in (0, 1].
    double uniform_pos() { return 1.0 - uniform(); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller (one output per two uniforms; no cached state).
    double normal();
    double gamma(double shape);
    double beta(double a, double b);
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

    // UniformRandomBitGenerator interface.
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()() { return next_u64(); }

   private:
    explicit Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace himar
