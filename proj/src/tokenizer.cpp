// SPDX-License-Identifier: Apache-2.0
#include "himar/tokenizer.hpp"

#include <cmath>
#include <string>

#include "himar/errors.hpp"

namespace himar {

NormStats NormStats::identity(std::size_t channels) { return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)}; }

ImagePyramid ImagePyramid::build(const Image& full, std::size_t patch_size) {
    const std::size_t f = 2 * patch_size;
    if (patch_size == 0 || full.height % f != 0 || full.width % f != 0) {
        throw ConfigError("image " + std::to_string(full.height) + "x" + std::to_string(full.width) +
                          " is not divisible by 2*patch_size=" + std::to_string(f));
    }
    return {full, downsample(full)};
}

Image downsample(const Image& full) {
    if (full.height % 2 != 0 || full.width % 2 != 0) {
        throw ConfigError("downsample needs even extents, got " + std::to_string(full.height) + "x" + std::to_string(full.width));
    }
    Image low(full.height / 2, full.width / 2, full.channels);
    for (std::size_t y = 0; y < low.height; ++y) {
        for (std::size_t x = 0; x < low.width; ++x) {
            for (std::size_t c = 0; c < full.channels; ++c) {
                low.at(y, x, c) = 0.25 * (full.at(2 * y, 2 * x, c) + full.at(2 * y, 2 * x + 1, c) + full.at(2 * y + 1, 2 * x, c) +
                                          full.at(2 * y + 1, 2 * x + 1, c));
            }
        }
    }
    return low;
}

TokenGrid patchify(const Image& img, std::size_t patch_size, const NormStats& stats, int scale_id) {
    if (patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0) {
        throw ConfigError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) + " not divisible by patch size " +
                          std::to_string(patch_size));
    }
    if (stats.channels() != img.channels) throw DimensionError("normalization stats channel count mismatch");
    TokenGrid g;
    g.rows = img.height / patch_size;
    g.cols = img.width / patch_size;
    g.dim = patch_size * patch_size * img.channels;
    g.patch_size = patch_size;
    g.scale_id = scale_id;
    g.values.resize(g.count() * g.dim);
    std::size_t k = 0;
    for (std::size_t r = 0; r < g.rows; ++r) {
        for (std::size_t q = 0; q < g.cols; ++q) {
            for (std::size_t py = 0; py < patch_size; ++py) {
                for (std::size_t px = 0; px < patch_size; ++px) {
                    for (std::size_t c = 0; c < img.channels; ++c) {
                        g.values[k++] = (img.at(r * patch_size + py, q * patch_size + px, c) - stats.mean[c]) / stats.stddev[c];
                    }
                }
            }
        }
    }
    return g;
}

Image unpatchify(const TokenGrid& grid, const NormStats& stats) {
    const std::size_t p = grid.patch_size;
    const std::size_t channels = stats.channels();
    if (p == 0 || channels == 0 || grid.dim != p * p * channels || grid.values.size() != grid.count() * grid.dim) {
        throw DimensionError("token grid is inconsistent with patch size / channel count");
    }
    Image img(grid.rows * p, grid.cols * p, channels);
    std::size_t k = 0;
    for (std::size_t r = 0; r < grid.rows; ++r) {
        for (std::size_t q = 0; q < grid.cols; ++q) {
            for (std::size_t py = 0; py < p; ++py) {
                for (std::size_t px = 0; px < p; ++px) {
                    for (std::size_t c = 0; c < channels; ++c) {
                        img.at(r * p + py, q * p + px, c) = grid.values[k++] * stats.stddev[c] + stats.mean[c];
                    }
                }
            }
        }
    }
    return img;
}

NormStats compute_stats(std::span<const Image> images) {
    if (images.empty()) throw ConfigError("cannot compute normalization stats of an empty image set");
    const std::size_t channels = images[0].channels;
    std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
    double count = 0.0;
    for (const Image& img : images) {
        if (img.channels != channels) throw DimensionError("mixed channel counts in image set");
        for (std::size_t i = 0; i < img.pixels.size(); ++i) {
            sum[i % channels] += img.pixels[i];
        }
        count += static_cast<double>(img.height * img.width);
    }
    NormStats s{std::vector<double>(channels), std::vector<double>(channels)};
    for (std::size_t c = 0; c < channels; ++c) s.mean[c] = sum[c] / count;
    for (const Image& img : images) {
        for (std::size_t i = 0; i < img.pixels.size(); ++i) {
            const double d = img.pixels[i] - s.mean[i % channels];
            sq[i % channels] += d * d;
        }
    }
    for (std::size_t c = 0; c < channels; ++c) {
        s.stddev[c] = std::sqrt(sq[c] / count);
        if (!(s.stddev[c] > 0.0)) s.stddev[c] = 1.0;
    }
    return s;
}

TokenBounds token_bounds(const NormStats& stats, std::size_t patch_size) {
    const std::size_t channels = stats.channels();
    const std::size_t dim = patch_size * patch_size * channels;
    TokenBounds b{std::vector<double>(dim), std::vector<double>(dim)};
    for (std::size_t j = 0; j < dim; ++j) {
        const std::size_t c = j % channels;
        b.lo[j] = (0.0 - stats.mean[c]) / stats.stddev[c];
        b.hi[j] = (1.0 - stats.mean[c]) / stats.stddev[c];
    }
    return b;
}

}  // namespace himar
