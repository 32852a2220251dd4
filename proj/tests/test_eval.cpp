// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "himar/dataset.hpp"
#include "himar/errors.hpp"
#include "himar/eval.hpp"
#include "himar/rng.hpp"

using namespace himar;

namespace {

Features gaussian(std::size_t n, std::size_t dim, std::uint64_t seed, double shift = 0.0) {
    Rng rng(seed, Stream::eval);
    Features f{n, dim, std::vector<double>(n * dim)};
    for (std::size_t i = 0; i < n; ++i) {
        // Correlated coordinates so the covariance is not diagonal.
        double carry = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            carry = 0.5 * carry + rng.normal();
            f.values[i * dim + j] = carry + shift;
        }
    }
    return f;
}

}  // namespace

TEST(Frechet, IdenticalSetsAreZero) {
    const Features a = gaussian(200, 6, 1);
    EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-8);
}

TEST(Frechet, SymmetricAndNonNegative) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Features a = gaussian(100, 5, 10 + s), b = gaussian(120, 5, 20 + s, 0.3 * static_cast<double>(s));
        const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
        EXPECT_GE(ab, 0.0);
        EXPECT_NEAR(ab, ba, 1e-9 * std::max(1.0, ab));
    }
}

TEST(Frechet, AffineImageHasClosedForm) {
    // b = 2 a + c gives S_b = 4 S_a, so the trace term is tr(S_a) and
    // FD = |mu_a + c|^2 + tr(S_a).
    const std::size_t n = 150, dim = 4;
    const Features a = gaussian(n, dim, 3);
    const std::vector<double> c{0.5, -1.0, 2.0, 0.0};
    Features b = a;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) b.values[i * dim + j] = 2.0 * a.values[i * dim + j] + c[j];
    double shift2 = 0.0, trace = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += a.values[i * dim + j];
        mu /= n;
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (a.values[i * dim + j] - mu) * (a.values[i * dim + j] - mu);
        trace += var / (n - 1);
        shift2 += (mu + c[j]) * (mu + c[j]);
    }
    EXPECT_NEAR(frechet_distance(a, b), shift2 + trace, 1e-9);
}

TEST(Frechet, MeanShiftOfIndependentSamples) {
    const Features a = gaussian(20000, 3, 4), b = gaussian(20000, 3, 5, 1.0);
    // Expected |delta|^2 = 3, plus sampling noise in the covariance term.
    EXPECT_NEAR(frechet_distance(a, b), 3.0, 0.15);
}

TEST(Frechet, TooFewRowsRejected) {
    const Features a = gaussian(4, 4, 6);
    EXPECT_THROW(frechet_distance(a, a), ConfigError);
}

TEST(FeatureExtractor, DeterministicAndSeeded) {
    const FeatureExtractor a(1234, 1), b(1234, 1), c(99, 1);
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_NE(a.hash(), c.hash());
    EXPECT_EQ(a.hash().size(), 16u);
    const Image img = render_shape(3, 1, 0);
    const auto fa = a.features(img);
    EXPECT_EQ(fa.size(), FeatureExtractor::kDim);
    EXPECT_EQ(fa, b.features(img));
    const Features batch = a.extract(std::vector<Image>{img, render_shape(5, 1, 1)});
    EXPECT_EQ(batch.n, 2u);
    EXPECT_EQ(std::vector<double>(batch.values.begin(), batch.values.begin() + 64), fa);
}

TEST(FdProxy, NeedsEnoughImages) {
    const Dataset ds = make_shapes_dataset(70, 2);
    const FeatureExtractor fx(1234, 1);
    const std::span<const Image> all(ds.images);
    EXPECT_THROW(fd_proxy(all.first(64), all, fx), ConfigError);
    EXPECT_NEAR(fd_proxy(all, all, fx), 0.0, 1e-8);
}

TEST(LinearProbe, SeparatesShapeClasses) {
    const Dataset train = make_shapes_dataset(400, 3), test = make_shapes_dataset(200, 4);
    const FeatureExtractor fx(1234, 1);
    const LinearProbe probe = LinearProbe::fit(fx.extract(train.images), train.labels, 10);
    const Features tf = fx.extract(test.images);
    EXPECT_GT(probe.accuracy(tf, test.labels), 0.6);
    const auto p = probe.probabilities(std::span(tf.values).first(64));
    double s = 0;
    for (double v : p) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    const double is = is_proxy(probe, tf);
    EXPECT_GE(is, 1.0);
    EXPECT_LE(is, 10.0 + 1e-9);
}

TEST(Sweep, GridParsing) {
    const auto g = parse_sweep_grid("8:4,16:4,32:1");
    ASSERT_EQ(g.size(), 3u);
    EXPECT_EQ(g[2].phase1_steps, 32u);
    EXPECT_EQ(g[2].phase2_steps, 1u);
    EXPECT_THROW(parse_sweep_grid("8"), ConfigError);
    EXPECT_THROW(parse_sweep_grid("0:4"), ConfigError);
    EXPECT_THROW(parse_sweep_grid("8:x"), ConfigError);
    const auto d = default_sweep_grid();
    ASSERT_EQ(d.size(), 9u);
    EXPECT_EQ(d.front().phase1_steps, 8u);
    EXPECT_FALSE(d[3].phase1_fixed);
    EXPECT_TRUE(d[4].phase1_fixed);
    EXPECT_EQ(d[4].phase2_steps, 1u);
}

TEST(Sweep, CsvRoundTrip) {
    const std::vector<SweepRow> rows{{8, 4, 1.5, 12.25, 3.0625, 256, 7}, {32, 1, 1.5, 0.1, 1e-300, 2048, 0}};
    std::stringstream ss;
    write_sweep_csv(ss, rows);
    EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), kSweepHeader);
    EXPECT_EQ(read_sweep_csv(ss), rows);
    std::stringstream bad("phase1_steps\n1,2\n");
    EXPECT_THROW(read_sweep_csv(bad), FormatError);
}

TEST(Sweep, SmallModelRunIsDeterministicAndLogsSkips) {
    ModelConfig m;
    m.image_size = 8;
    m.patch_size = 2;
    m.n_classes = 3;
    m.depth = 1;
    m.width = 16;
    m.heads = 2;
    m.ffn_mult = 2;
    m.head1_depth = m.head2_depth = 1;
    m.head1_width = m.head2_width = 16;
    m.head2_heads = 2;
    m.head_ffn_mult = 2;
    const HiMarModel model(m, 1);
    const FeatureExtractor fx(1234, 1);
    Rng rng(1, Stream::eval);
    std::vector<Image> refs(70, Image(8, 8, 1));
    for (Image& img : refs)
        for (double& p : img.pixels) p = rng.uniform();
    const Features ref_feats = fx.extract(refs);

    SweepOptions opts;
    opts.generate.steps1 = 2;
    opts.generate.sample_steps1 = 3;
    opts.generate.sample_steps2 = 3;
    opts.eval.n_samples = 66;
    opts.eval.timing_images = 4;
    opts.eval.warmup_images = 1;
    opts.eval.seed = 3;
    std::vector<std::string> logs;
    opts.log = [&](const std::string& s) { logs.push_back(s); };
    const auto grid = parse_sweep_grid("2:1,8:1,2:2,2:1");
    const auto a = run_sweep(model, NormStats::identity(1), ref_feats, fx, grid, opts);
    ASSERT_EQ(a.size(), 2u);
    const auto skipped = std::count_if(logs.begin(), logs.end(), [](const std::string& l) { return l.find("skipped") != std::string::npos; });
    EXPECT_EQ(skipped, 1);  // 8 phase-1 steps exceed the 4 low tokens
    EXPECT_EQ(a[1].phase2_steps, 2u);
    const auto b = run_sweep(model, NormStats::identity(1), ref_feats, fx, grid, opts);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].fd_proxy, b[i].fd_proxy);
        EXPECT_EQ(a[i].n_samples, 66u);
        EXPECT_GT(a[i].ms_per_image, 0.0);
        EXPECT_TRUE(std::isfinite(a[i].fd_proxy));
    }

    // A held phase-1 count that does not fit falls back to generate.steps1.
    logs.clear();
    const std::vector<SweepPoint> held{{32, 1, true}};
    const auto c = run_sweep(model, NormStats::identity(1), ref_feats, fx, held, opts);
    ASSERT_EQ(c.size(), 1u);
    EXPECT_EQ(c[0].phase1_steps, 2u);
    EXPECT_EQ(c[0].fd_proxy, a[0].fd_proxy);
    EXPECT_NE(logs.front().find("using 2"), std::string::npos);
}
