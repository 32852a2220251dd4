// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale quality metrics and the step-count / speed sweep harness.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "himar/config.hpp"
#include "himar/model.hpp"
#include "himar/tokenizer.hpp"

namespace himar {

/// Row-major [n, dim] feature matrix.
struct Features {
    std::size_t n = 0;
    std::size_t dim = 0;
    std::vector<double> values;
};

/// Frechet distance between Gaussians fit to two feature sets:
///   |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
/// The trace of the matrix square root is computed from the eigenvalues of
/// S_a^{1/2} S_b S_a^{1/2}. Eigenvalues down to -1e-8 (relative to the largest)
/// are treated as zero; anything more negative raises NumericError carrying the
/// condition number. Each set needs at least dim + 1 rows.
double frechet_distance(const Features& a, const Features& b);

/// Fixed random convolutional network: three (3x3 conv, ReLU, 2x2 average
/// pool) stages with 16, 32 and 64 channels, then a global average pool to a
/// 64-dim feature. Weights depend only on the seed and the input channels.
class FeatureExtractor {
   public:
    static constexpr std::size_t kDim = 64;

    FeatureExtractor(std::uint64_t seed, std::size_t channels);

    std::vector<double> features(const Image& img) const;
    /// Features of every image, computed on the worker pool.
    Features extract(std::span<const Image> images) const;
    /// FNV-1a hash of the architecture tag and every weight, as 16 hex digits.
    std::string hash() const;

    std::size_t channels() const { return channels_; }

   private:
    struct Conv {
        std::size_t in = 0;
        std::size_t out = 0;
        std::vector<double> weight;  // [out][in][3][3]
        std::vector<double> bias;
    };
    std::size_t channels_;
    std::vector<Conv> stages_;
};

/// Extracts features from both image sets and returns their Frechet distance.
/// Throws ConfigError when either set has fewer than 65 images.
double fd_proxy(std::span<const Image> samples, std::span<const Image> reference, const FeatureExtractor& extractor);

/// Softmax regression on frozen extractor features, used for the IS-proxy.
class LinearProbe {
   public:
    /// Full-batch gradient descent with L2 penalty on standardized features.
    static LinearProbe fit(const Features& feats, std::span<const std::size_t> labels, std::size_t n_classes, std::size_t iterations = 300,
                           double lr = 0.5, double l2 = 1e-4);

    std::vector<double> probabilities(std::span<const double> feature) const;
    double accuracy(const Features& feats, std::span<const std::size_t> labels) const;

    std::size_t n_classes = 0;
    std::size_t dim = 0;
    std::vector<double> mean, inv_std;
    std::vector<double> weight;  // [dim, n_classes]
    std::vector<double> bias;
};

/// exp(mean_x KL(p(y|x) || p(y))) under the probe's class probabilities.
double is_proxy(const LinearProbe& probe, const Features& feats);

struct SweepPoint {
    std::size_t phase1_steps = 0;
    std::size_t phase2_steps = 0;
    /// Set on the phase-2 series, whose phase-1 count is a held value rather
    /// than a swept one.
    bool phase1_fixed = false;
};

struct SweepRow {
    std::size_t phase1_steps = 0;
    std::size_t phase2_steps = 0;
    double guidance = 0.0;
    double ms_per_image = 0.0;
    double fd_proxy = 0.0;
    std::size_t n_samples = 0;
    std::uint64_t seed = 0;
    bool operator==(const SweepRow&) const = default;
};

inline constexpr const char* kSweepHeader = "phase1_steps,phase2_steps,guidance,ms_per_image,fd_proxy,n_samples,seed";

/// phase1 in {8,16,32,64} with phase2 = 4, then phase2 in {1,2,4,6,8} with
/// phase1 = 32 held. The shared 32:4 point appears in both series and
/// run_sweep runs it once.
std::vector<SweepPoint> default_sweep_grid();
/// "8:4,16:4,32:1" style list of phase1:phase2 pairs, or "default".
std::vector<SweepPoint> parse_sweep_grid(const std::string& text);

struct SweepOptions {
    GenerateConfig generate;
    EvalConfig eval;
    /// Called with a human-readable reason whenever a grid point is skipped or adjusted.
    std::function<void(const std::string&)> log;
};

/// Generates eval.n_samples images per grid point and records the time per
/// image and fd_proxy against `reference_features`. Timing follows
/// eval.warmup_images untimed images and covers at least eval.timing_images
/// images. A point whose step counts exceed the grid sizes is skipped, except
/// that a held phase-1 count (phase1_fixed) falls back to generate.steps1.
/// Both cases are logged. Points that coincide after this are run once.
std::vector<SweepRow> run_sweep(const HiMarModel& model, const NormStats& stats, const Features& reference_features,
                                const FeatureExtractor& extractor, std::span<const SweepPoint> grid, const SweepOptions& opts);

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows);
std::vector<SweepRow> read_sweep_csv(std::istream& is);

}  // namespace himar
