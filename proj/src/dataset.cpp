// SPDX-License-Identifier: Apache-2.0
#include "himar/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "himar/errors.hpp"
#include "himar/format.hpp"
#include "himar/rng.hpp"

namespace himar {

namespace {

constexpr std::size_t kShapeSide = 32;
constexpr std::size_t kShapeClasses = 10;

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Anti-aliased coverage of a band of half-width hw at signed distance dist.
double coverage(double dist, double hw) { return std::clamp(hw - dist + 0.5, 0.0, 1.0); }

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double t = std::clamp(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
    if (begin + count > size()) throw ConfigError("dataset slice out of range");
    Dataset out{height, width, channels, n_classes, {}, {}};
    out.images.assign(images.begin() + static_cast<std::ptrdiff_t>(begin), images.begin() + static_cast<std::ptrdiff_t>(begin + count));
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    return out;
}

void write_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    le::write_u32(os, static_cast<std::uint32_t>(ds.size()));
    le::write_u32(os, static_cast<std::uint32_t>(ds.height));
    le::write_u32(os, static_cast<std::uint32_t>(ds.width));
    le::write_u32(os, static_cast<std::uint32_t>(ds.channels));
    le::write_u32(os, static_cast<std::uint32_t>(ds.n_classes));
    std::vector<char> bytes(ds.height * ds.width * ds.channels);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Image& img = ds.images[i];
        if (img.height != ds.height || img.width != ds.width || img.channels != ds.channels) throw DimensionError("record " + std::to_string(i) + " has the wrong extents");
        le::write_u16(os, static_cast<std::uint16_t>(ds.labels[i]));
        for (std::size_t k = 0; k < bytes.size(); ++k) bytes[k] = static_cast<char>(to_byte(img.pixels[k]));
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    if (!os) throw FormatError("write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open dataset " + path);
    Dataset ds;
    const std::uint32_t count = le::read_u32(is);
    ds.height = le::read_u32(is);
    ds.width = le::read_u32(is);
    ds.channels = le::read_u32(is);
    ds.n_classes = le::read_u32(is);
    if (ds.height == 0 || ds.width == 0 || ds.channels == 0 || ds.n_classes == 0) throw FormatError(path + ": zero extent or class count in header");
    const std::size_t bytes_per = ds.height * ds.width * ds.channels;
    std::vector<unsigned char> bytes(bytes_per);
    ds.images.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t label = le::read_u16(is);
        if (label >= ds.n_classes) throw FormatError(path + ": record " + std::to_string(i) + " has label " + std::to_string(label));
        is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes_per));
        if (!is) throw FormatError(path + ": truncated at record " + std::to_string(i));
        Image img(ds.height, ds.width, ds.channels);
        for (std::size_t k = 0; k < bytes_per; ++k) img.pixels[k] = bytes[k] / 255.0;
        ds.images.push_back(std::move(img));
        ds.labels.push_back(label);
    }
    return ds;
}

Image render_shape(std::size_t label, std::uint64_t seed, std::size_t index) {
    if (label >= kShapeClasses) throw ConfigError("shape label must be below 10");
    Rng rng = Rng(seed, Stream::synth).fork(index);
    const double n = static_cast<double>(kShapeSide);
    const double cx = n / 2 + rng.uniform(-3.0, 3.0), cy = n / 2 + rng.uniform(-3.0, 3.0);
    const double intensity = rng.uniform(0.7, 1.0);
    Image img(kShapeSide, kShapeSide, 1);

    auto paint = [&](auto&& value_at) {
        for (std::size_t y = 0; y < kShapeSide; ++y) {
            for (std::size_t x = 0; x < kShapeSide; ++x) {
                const double v = value_at(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
                img.at(y, x, 0) = std::max(img.at(y, x, 0), intensity * v);
            }
        }
    };

    if (label < 4) {
        const double angle = static_cast<double>(label) * std::numbers::pi / 4 + rng.uniform(-0.12, 0.12);
        const double half_len = rng.uniform(9.0, 13.0), hw = rng.uniform(1.2, 2.0);
        const double dx = std::cos(angle) * half_len, dy = std::sin(angle) * half_len;
        paint([&](double px, double py) { return coverage(segment_distance(px, py, cx - dx, cy - dy, cx + dx, cy + dy), hw); });
    } else if (label < 7) {
        const double radius = 4.5 + 3.0 * static_cast<double>(label - 4) + rng.uniform(-0.8, 0.8);
        const double hw = rng.uniform(0.9, 1.4);
        paint([&](double px, double py) { return coverage(std::abs(std::hypot(px - cx, py - cy) - radius), hw); });
    } else {
        const std::size_t blobs = label == 7 ? 1 : (label == 8 ? 2 : 4);
        const double sigma = rng.uniform(2.0, 2.8);
        const double spread = rng.uniform(5.0, 7.0);
        const double rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
        std::vector<std::pair<double, double>> centers;
        for (std::size_t k = 0; k < blobs; ++k) {
            if (blobs == 1) {
                centers.emplace_back(cx, cy);
            } else {
                const double a = rot + 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(blobs);
                centers.emplace_back(cx + spread * std::cos(a), cy + spread * std::sin(a));
            }
        }
        const double s = blobs == 1 ? sigma * 1.6 : sigma;
        paint([&](double px, double py) {
            double v = 0.0;
            for (const auto& [bx, by] : centers) v = std::max(v, std::exp(-((px - bx) * (px - bx) + (py - by) * (py - by)) / (2 * s * s)));
            return v;
        });
    }
    for (double& p : img.pixels) p = to_byte(p) / 255.0;
    return img;
}

Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed) {
    Dataset ds{kShapeSide, kShapeSide, 1, kShapeClasses, {}, {}};
    ds.images.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        ds.labels.push_back(i % kShapeClasses);
        ds.images.push_back(render_shape(i % kShapeClasses, seed, i));
    }
    return ds;
}

std::string encode_netpbm(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw ConfigError("NetPBM export supports 1 or 3 channels, got " + std::to_string(img.channels));
    std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.reserve(out.size() + img.pixels.size());
    for (double v : img.pixels) out.push_back(static_cast<char>(to_byte(v)));
    return out;
}

void write_netpbm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    const std::string data = encode_netpbm(img);
    os.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!os) throw FormatError("write failed for " + path);
}

Image read_netpbm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if ((magic != "P5" && magic != "P6") || maxval != 255 || w == 0 || h == 0) throw FormatError(path + ": unsupported NetPBM header");
    is.get();
    const std::size_t c = magic == "P5" ? 1 : 3;
    std::vector<unsigned char> bytes(w * h * c);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw FormatError(path + ": truncated pixel data");
    Image img(h, w, c);
    for (std::size_t k = 0; k < bytes.size(); ++k) img.pixels[k] = bytes[k] / 255.0;
    return img;
}

}  // namespace himar
