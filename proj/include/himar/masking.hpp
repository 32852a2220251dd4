// SPDX-License-Identifier: Apache-2.0
//
// Masking-ratio samplers for training and the step schedule used by
// iterative generation.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "himar/rng.hpp"

namespace himar {

/// Known/masked flags plus token values for one grid during generation.
struct MaskState {
    std::size_t n = 0;
    std::size_t dim = 0;
    std::vector<std::uint8_t> known;
    /// n * dim values; only entries at known positions are meaningful.
    std::vector<double> values;

    static MaskState all_masked(std::size_t n, std::size_t dim);
    std::size_t known_count() const;
    std::size_t masked_count() const { return n - known_count(); }
    std::vector<std::size_t> masked_positions() const;
    void set(std::size_t pos, const double* token);
};

class RatioSampler {
   public:
    enum class Kind { uniform, cosine, beta };

    static RatioSampler uniform(double lo, double hi);
    static RatioSampler cosine();
    static RatioSampler beta(double a, double b);
    /// Parses "uniform:0.7:1.0", "cosine", or "beta:4:1".
    static RatioSampler parse(const std::string& text);

    Kind kind() const { return kind_; }
    double p0() const { return p0_; }
    double p1() const { return p1_; }
    std::string to_string() const;

    /// Draws a masking ratio in (0, 1].
    double sample(Rng& rng) const;

   private:
    RatioSampler(Kind k, double a, double b) : kind_(k), p0_(a), p1_(b) {}
    Kind kind_;
    double p0_;
    double p1_;
};

/// Number of positions to mask for ratio r over n tokens: ceil(r n), at least 1.
std::size_t masked_count_for_ratio(double r, std::size_t n);

/// Tokens predicted at each of K steps under the cosine schedule. Masked
/// count after step k is ceil(N cos(pi k / 2K)), clamped so each step predicts
/// at least one token; the result is positive, sums to N, and ends fully known.
std::vector<std::size_t> inference_schedule(std::size_t n, std::size_t steps);

/// Uniformly random masked positions without replacement, sorted ascending.
std::vector<std::size_t> choose_positions(const MaskState& state, std::size_t count, Rng& rng);

/// Uniformly random subset of {0..n-1} of the given size, sorted ascending.
std::vector<std::size_t> random_subset(std::size_t n, std::size_t count, Rng& rng);

}  // namespace himar
