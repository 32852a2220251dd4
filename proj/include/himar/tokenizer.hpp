// SPDX-License-Identifier: Apache-2.0
//
// Fixed, exactly invertible patch tokenizer at two scales.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace himar {

/// H x W x C image, row-major with channels innermost. Values nominally in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0) : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

/// Per-channel standardization constants.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;

    static NormStats identity(std::size_t channels);
    std::size_t channels() const { return mean.size(); }
};

/// Grid of continuous tokens at one scale. Each token holds one flattened
/// patch in (row, col, channel) order; tokens are stored row-major.
struct TokenGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t dim = 0;
    std::size_t patch_size = 0;
    int scale_id = 1;
    std::vector<double> values;

    std::size_t count() const { return rows * cols; }
    std::span<const double> token(std::size_t i) const { return {values.data() + i * dim, dim}; }
};

struct ImagePyramid {
    Image full;
    Image low;

    /// Builds the low level with `downsample`; requires extents divisible by 2 * patch_size.
    static ImagePyramid build(const Image& full, std::size_t patch_size);
};

/// 2x2 area average.
Image downsample(const Image& full);
TokenGrid patchify(const Image& img, std::size_t patch_size, const NormStats& stats, int scale_id = 1);
Image unpatchify(const TokenGrid& grid, const NormStats& stats);

/// Per-channel mean and standard deviation over a set of images.
NormStats compute_stats(std::span<const Image> images);

/// Token-space images of pixel values 0 and 1 per token entry; used to clip
/// denoised estimates to the displayable range.
struct TokenBounds {
    std::vector<double> lo;
    std::vector<double> hi;
};
TokenBounds token_bounds(const NormStats& stats, std::size_t patch_size);

}  // namespace himar
