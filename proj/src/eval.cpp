// SPDX-License-Identifier: Apache-2.0
#include "himar/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "himar/errors.hpp"
#include "himar/format.hpp"
#include "himar/generate.hpp"
#include "himar/parallel.hpp"
#include "himar/rng.hpp"

namespace himar {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

void moments(const Features& f, Vec& mu, Mat& cov) {
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(
        f.values.data(), static_cast<Eigen::Index>(f.n), static_cast<Eigen::Index>(f.dim));
    mu = x.colwise().mean().transpose();
    const Mat centered = x.rowwise() - mu.transpose();
    cov = (centered.transpose() * centered) / static_cast<double>(f.n - 1);
}

// Symmetric PSD square root; eigenvalues within tolerance of zero are clamped.
Vec clamped_eigenvalues(const Mat& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
    Vec ev = es.eigenvalues();
    const double top = std::max(1.0, std::abs(ev.maxCoeff()));
    const double low = ev.minCoeff();
    if (low < -1e-8 * top) {
        const double cond = std::abs(ev.maxCoeff()) / std::max(std::abs(low), 1e-300);
        throw NumericError(std::string(what) + " is not positive semidefinite (smallest eigenvalue " + format_double(low) +
                           ", condition number " + format_double(cond) + ")");
    }
    return ev.cwiseMax(0.0);
}

Mat psd_sqrt(const Mat& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
    const Vec ev = clamped_eigenvalues(m, what);
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Features& a, const Features& b) {
    if (a.dim != b.dim || a.dim == 0) throw DimensionError("feature sets differ in dimension");
    if (a.n < a.dim + 1 || b.n < b.dim + 1) {
        throw ConfigError("Frechet distance needs at least " + std::to_string(a.dim + 1) + " samples per set, got " + std::to_string(a.n) +
                          " and " + std::to_string(b.n));
    }
    Vec mu_a, mu_b;
    Mat s_a, s_b;
    moments(a, mu_a, s_a);
    moments(b, mu_b, s_b);
    const Mat root_a = psd_sqrt(s_a, "first covariance");
    Mat inner = root_a * s_b * root_a;
    inner = 0.5 * (inner + inner.transpose());
    const double tr_sqrt = clamped_eigenvalues(inner, "covariance product").cwiseSqrt().sum();
    const double d = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

FeatureExtractor::FeatureExtractor(std::uint64_t seed, std::size_t channels) : channels_(channels) {
    if (channels == 0) throw ConfigError("feature extractor needs at least one input channel");
    Rng rng = Rng(seed, Stream::eval).fork(0xfea7);
    const std::size_t widths[3] = {16, 32, kDim};
    std::size_t in = channels;
    for (std::size_t out : widths) {
        Conv c{in, out, std::vector<double>(out * in * 9), std::vector<double>(out)};
        const double sd = std::sqrt(2.0 / static_cast<double>(in * 9));
        for (double& w : c.weight) w = sd * rng.normal();
        for (double& bval : c.bias) bval = 0.1 * rng.normal();
        stages_.push_back(std::move(c));
        in = out;
    }
}

std::vector<double> FeatureExtractor::features(const Image& img) const {
    if (img.channels != channels_) throw DimensionError("extractor expects " + std::to_string(channels_) + " channels");
    std::size_t h = img.height, w = img.width;
    // Activations stored as [channel][y][x].
    std::vector<double> act(channels_ * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels_; ++c) act[(c * h + y) * w + x] = img.at(y, x, c);
        }
    }
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const Conv& cv = stages_[s];
        std::vector<double> conv(cv.out * h * w);
        for (std::size_t o = 0; o < cv.out; ++o) {
            double* dst = conv.data() + o * h * w;
            std::fill(dst, dst + h * w, cv.bias[o]);
            for (std::size_t i = 0; i < cv.in; ++i) {
                const double* src = act.data() + i * h * w;
                const double* k = cv.weight.data() + (o * cv.in + i) * 9;
                for (std::size_t y = 0; y < h; ++y) {
                    for (int dy = -1; dy <= 1; ++dy) {
                        const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
                        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
                        const double* row = src + static_cast<std::size_t>(yy) * w;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const double kv = k[(dy + 1) * 3 + (dx + 1)];
                            const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? w - 1 : w;
                            for (std::size_t x = x0; x < x1; ++x) dst[y * w + x] += kv * row[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x) + dx)];
                        }
                    }
                }
            }
        }
        for (double& v : conv) v = std::max(v, 0.0);
        if (s + 1 < stages_.size()) {
            const std::size_t h2 = h / 2, w2 = w / 2;
            std::vector<double> pooled(cv.out * h2 * w2);
            for (std::size_t o = 0; o < cv.out; ++o) {
                for (std::size_t y = 0; y < h2; ++y) {
                    for (std::size_t x = 0; x < w2; ++x) {
                        const double* p = conv.data() + (o * h + 2 * y) * w + 2 * x;
                        pooled[(o * h2 + y) * w2 + x] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
                    }
                }
            }
            act = std::move(pooled);
            h = h2;
            w = w2;
        } else {
            act = std::move(conv);
        }
    }
    std::vector<double> feat(kDim);
    const double inv = 1.0 / static_cast<double>(h * w);
    for (std::size_t o = 0; o < kDim; ++o) {
        double acc = 0.0;
        for (std::size_t k = 0; k < h * w; ++k) acc += act[o * h * w + k];
        feat[o] = acc * inv;
    }
    return feat;
}

Features FeatureExtractor::extract(std::span<const Image> images) const {
    Features f{images.size(), kDim, std::vector<double>(images.size() * kDim)};
    parallel_for(images.size(), [&](std::size_t i) {
        const auto v = features(images[i]);
        std::copy(v.begin(), v.end(), f.values.begin() + static_cast<std::ptrdiff_t>(i * kDim));
    });
    return f;
}

std::string FeatureExtractor::hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    const std::string tag = "conv3x3-relu-avgpool:16,32,64:gap:c" + std::to_string(channels_);
    mix(tag.data(), tag.size());
    for (const Conv& c : stages_) {
        mix(c.weight.data(), c.weight.size() * sizeof(double));
        mix(c.bias.data(), c.bias.size() * sizeof(double));
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double fd_proxy(std::span<const Image> samples, std::span<const Image> reference, const FeatureExtractor& extractor) {
    const std::size_t need = FeatureExtractor::kDim + 1;
    if (samples.size() < need || reference.size() < need) {
        throw ConfigError("fd_proxy needs at least " + std::to_string(need) + " images per side, got " + std::to_string(samples.size()) +
                          " and " + std::to_string(reference.size()));
    }
    return frechet_distance(extractor.extract(samples), extractor.extract(reference));
}

LinearProbe LinearProbe::fit(const Features& feats, std::span<const std::size_t> labels, std::size_t n_classes, std::size_t iterations,
                             double lr, double l2) {
    if (labels.size() != feats.n || feats.n == 0) throw DimensionError("probe needs one label per feature row");
    LinearProbe p;
    p.n_classes = n_classes;
    p.dim = feats.dim;
    p.mean.assign(p.dim, 0.0);
    p.inv_std.assign(p.dim, 0.0);
    const auto n = static_cast<Eigen::Index>(feats.n), d = static_cast<Eigen::Index>(feats.dim), k = static_cast<Eigen::Index>(n_classes);
    Mat x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(feats.values.data(), n, d);
    const Vec mu = x.colwise().mean();
    x.rowwise() -= mu.transpose();
    const Vec sd = (x.array().square().colwise().sum() / static_cast<double>(feats.n)).sqrt().matrix().transpose();
    for (Eigen::Index j = 0; j < d; ++j) {
        p.mean[static_cast<std::size_t>(j)] = mu(j);
        p.inv_std[static_cast<std::size_t>(j)] = sd(j) > 1e-12 ? 1.0 / sd(j) : 0.0;
        x.col(j) *= p.inv_std[static_cast<std::size_t>(j)];
    }
    Mat y = Mat::Zero(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (labels[static_cast<std::size_t>(i)] >= n_classes) throw ConfigError("probe label out of range");
        y(i, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)])) = 1.0;
    }
    Mat w = Mat::Zero(d, k);
    Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(k);
    for (std::size_t it = 0; it < iterations; ++it) {
        Mat logits = (x * w).rowwise() + b;
        logits.colwise() -= logits.rowwise().maxCoeff();
        Mat prob = logits.array().exp().matrix();
        prob.array().colwise() /= prob.rowwise().sum().array();
        const Mat g = (prob - y) / static_cast<double>(feats.n);
        w -= lr * (x.transpose() * g + l2 * w);
        b -= lr * g.colwise().sum();
    }
    p.weight.resize(static_cast<std::size_t>(d * k));
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j < k; ++j) p.weight[static_cast<std::size_t>(i * k + j)] = w(i, j);
    }
    p.bias.assign(b.data(), b.data() + k);
    return p;
}

std::vector<double> LinearProbe::probabilities(std::span<const double> feature) const {
    if (feature.size() != dim) throw DimensionError("probe feature has the wrong dimension");
    std::vector<double> logits(bias);
    for (std::size_t i = 0; i < dim; ++i) {
        const double z = (feature[i] - mean[i]) * inv_std[i];
        for (std::size_t j = 0; j < n_classes; ++j) logits[j] += z * weight[i * n_classes + j];
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double& l : logits) s += (l = std::exp(l - mx));
    for (double& l : logits) l /= s;
    return logits;
}

double LinearProbe::accuracy(const Features& feats, std::span<const std::size_t> labels) const {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < feats.n; ++i) {
        const auto p = probabilities(std::span(feats.values).subspan(i * feats.dim, feats.dim));
        if (static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == labels[i]) ++hits;
    }
    return feats.n ? static_cast<double>(hits) / static_cast<double>(feats.n) : 0.0;
}

double is_proxy(const LinearProbe& probe, const Features& feats) {
    if (feats.n == 0) throw ConfigError("IS-proxy of an empty set");
    std::vector<std::vector<double>> probs;
    std::vector<double> marginal(probe.n_classes, 0.0);
    for (std::size_t i = 0; i < feats.n; ++i) {
        probs.push_back(probe.probabilities(std::span(feats.values).subspan(i * feats.dim, feats.dim)));
        for (std::size_t j = 0; j < probe.n_classes; ++j) marginal[j] += probs.back()[j] / static_cast<double>(feats.n);
    }
    double kl = 0.0;
    for (const auto& p : probs) {
        for (std::size_t j = 0; j < probe.n_classes; ++j) {
            if (p[j] > 0.0) kl += p[j] * (std::log(p[j]) - std::log(marginal[j]));
        }
    }
    return std::exp(kl / static_cast<double>(feats.n));
}

std::vector<SweepPoint> default_sweep_grid() {
    std::vector<SweepPoint> grid;
    for (std::size_t s1 : {8, 16, 32, 64}) grid.push_back({s1, 4, false});
    for (std::size_t s2 : {1, 2, 4, 6, 8}) grid.push_back({32, s2, true});
    return grid;
}

std::vector<SweepPoint> parse_sweep_grid(const std::string& text) {
    if (text == "default") return default_sweep_grid();
    std::vector<SweepPoint> grid;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("sweep point '" + item + "' must look like phase1:phase2");
        try {
            std::size_t used1 = 0, used2 = 0;
            const std::string a = item.substr(0, colon), b = item.substr(colon + 1);
            const unsigned long s1 = std::stoul(a, &used1), s2 = std::stoul(b, &used2);
            if (used1 != a.size() || used2 != b.size() || s1 == 0 || s2 == 0) throw std::invalid_argument(item);
            grid.push_back({s1, s2, false});
        } catch (const std::logic_error&) {
            throw ConfigError("sweep point '" + item + "' must hold two positive integers");
        }
    }
    if (grid.empty()) throw ConfigError("empty sweep grid");
    return grid;
}

std::vector<SweepRow> run_sweep(const HiMarModel& model, const NormStats& stats, const Features& reference_features,
                                const FeatureExtractor& extractor, std::span<const SweepPoint> grid, const SweepOptions& opts) {
    const std::size_t nl = model.cfg.low_tokens(), nd = model.cfg.dense_tokens();
    auto log = [&](const std::string& msg) {
        if (opts.log) opts.log(msg);
    };
    std::vector<SweepPoint> points;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (SweepPoint p : grid) {
        const std::string tag = "grid point " + std::to_string(p.phase1_steps) + ":" + std::to_string(p.phase2_steps);
        if (model.has_phase1() && p.phase1_steps > nl) {
            if (!p.phase1_fixed) {
                log(tag + " skipped: " + std::to_string(p.phase1_steps) + " phase-1 steps exceed the " + std::to_string(nl) + " low-resolution tokens");
                continue;
            }
            log(tag + ": held phase-1 count exceeds the " + std::to_string(nl) + " low-resolution tokens, using " +
                std::to_string(opts.generate.steps1));
            p.phase1_steps = opts.generate.steps1;
        }
        if (p.phase2_steps > nd) {
            log(tag + " skipped: " + std::to_string(p.phase2_steps) + " phase-2 steps exceed the " + std::to_string(nd) + " dense tokens");
            continue;
        }
        if (!seen.insert({p.phase1_steps, p.phase2_steps}).second) continue;
        points.push_back(p);
    }

    const std::size_t n = opts.eval.n_samples;
    std::vector<SweepRow> rows;
    for (const SweepPoint& p : points) {
        GenerateConfig g = opts.generate;
        g.steps1 = p.phase1_steps;
        g.steps2 = p.phase2_steps;
        if (opts.eval.warmup_images > 0) generate_many(model, opts.eval.warmup_images, g, stats, opts.eval.seed ^ 0x5eed);
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<Image> images = generate_many(model, n, g, stats, opts.eval.seed);
        double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        double ms = 1000.0 * seconds / static_cast<double>(n);
        if (n < opts.eval.timing_images) {
            const auto t1 = std::chrono::steady_clock::now();
            generate_many(model, opts.eval.timing_images, g, stats, opts.eval.seed ^ 0x7157);
            seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
            ms = 1000.0 * seconds / static_cast<double>(opts.eval.timing_images);
        }
        const double fd = frechet_distance(extractor.extract(images), reference_features);
        const double guidance = g.cfg_phase2 ? g.cfg_scale2 : (g.cfg_phase1 ? g.cfg_scale1 : 1.0);
        rows.push_back({g.steps1, g.steps2, guidance, ms, fd, n, opts.eval.seed});
        log("grid point " + std::to_string(g.steps1) + ":" + std::to_string(g.steps2) + " done: " + format_double(ms) + " ms/image, fd_proxy " +
            format_double(fd));
    }
    return rows;
}

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
    os << kSweepHeader << '\n';
    for (const auto& r : rows) {
        os << r.phase1_steps << ',' << r.phase2_steps << ',' << format_double(r.guidance) << ',' << format_double(r.ms_per_image) << ','
           << format_double(r.fd_proxy) << ',' << r.n_samples << ',' << r.seed << '\n';
    }
}

std::vector<SweepRow> read_sweep_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kSweepHeader) throw FormatError("sweep CSV header mismatch");
    std::vector<SweepRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw FormatError("sweep CSV line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
        try {
            rows.push_back({std::stoull(f[0]), std::stoull(f[1]), parse_double(f[2]), parse_double(f[3]), parse_double(f[4]), std::stoull(f[5]),
                            std::stoull(f[6])});
        } catch (const std::logic_error&) {
            throw FormatError("sweep CSV line " + std::to_string(lineno) + " is malformed");
        }
    }
    return rows;
}

}  // namespace himar
