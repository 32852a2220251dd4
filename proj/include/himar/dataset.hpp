// SPDX-License-Identifier: Apache-2.0
//
// Labeled image sets, the raw on-disk dataset format, the procedural toy
// "shapes" corpus, and NetPBM export.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "himar/tokenizer.hpp"

namespace himar {

struct Dataset {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::size_t n_classes = 0;
    /// Pixel values are byte / 255.
    std::vector<Image> images;
    std::vector<std::size_t> labels;

    std::size_t size() const { return images.size(); }
    /// Records [begin, begin + count) as a new dataset.
    Dataset slice(std::size_t begin, std::size_t count) const;
};

/// Raw little-endian format: u32 count, u32 H, u32 W, u32 C, u32 n_classes,
/// then per record a u16 label followed by H*W*C bytes (row-major, channels
/// innermost). Pixel values are quantized to round(255 v) on write.
void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

/// 32x32 grayscale shapes, 10 classes: bars at 0/45/90/135 degrees (0-3),
/// small/medium/large rings (4-6), and one/two/four blobs (7-9), each with
/// position, size, and intensity jitter. Record i has label i % 10 and is a
/// pure function of (seed, i). Pixels are quantized to bytes.
Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed);
Image render_shape(std::size_t label, std::uint64_t seed, std::size_t index);

/// Binary NetPBM: P5 for one channel, P6 for three. Values are clamped to
/// [0, 1] and rounded to bytes.
std::string encode_netpbm(const Image& img);
void write_netpbm(const std::string& path, const Image& img);
Image read_netpbm(const std::string& path);

}  // namespace himar
