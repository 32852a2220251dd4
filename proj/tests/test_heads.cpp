// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "himar/errors.hpp"
#include "himar/gradcheck.hpp"
#include "himar/heads.hpp"
#include "reference.hpp"

using namespace himar;

namespace {

ref::Vec lin(const ref::Vec& x, const nn::Linear& l) { return ref::affine(x, l.weight, l.bias.defined() ? &l.bias : nullptr); }
ref::Vec ffn(const ref::Vec& x, const nn::FeedForward& f) { return lin(ref::map(lin(x, f.fc1), ref::gelu), f.fc2); }
ref::Vec temb(const TimestepEmbedder& te, double t) { return lin(ref::map(lin(ref::sinusoidal(t, te.width), te.fc1), ref::silu), te.fc2); }
ref::Vec row(std::span<const double> v, std::size_t r, std::size_t cols) { return ref::Vec(v.begin() + r * cols, v.begin() + (r + 1) * cols); }

ref::Vec mlp_reference(const MlpHead& h, const ref::Vec& x, double t, const ref::Vec& z) {
    const std::size_t w = h.width;
    const ref::Vec c = ref::map(ref::add(temb(h.time_embed, t), lin(z, h.cond_embed)), ref::silu);
    ref::Vec s = lin(x, h.input_proj);
    for (const auto& blk : h.blocks) {
        const ref::Vec m = lin(c, blk.ada);
        s = ref::gated(s, ref::slice(m, 2 * w, w), ffn(ref::modulate(ref::layer_norm(s), ref::slice(m, 0, w), ref::slice(m, w, w)), blk.ffn));
    }
    const ref::Vec m = lin(c, h.final_ada);
    return lin(ref::modulate(ref::layer_norm(s), ref::slice(m, 0, w), ref::slice(m, w, w)), h.output_proj);
}

// One grid: y and z are n rows.
ref::Mat dit_reference(const DitHead& h, const ref::Mat& y, double t, const ref::Mat& z) {
    const std::size_t w = h.width, n = y.rows;
    const ref::Vec te = temb(h.time_embed, t);
    ref::Mat s{n, w, {}};
    std::vector<ref::Vec> c(n);
    for (std::size_t i = 0; i < n; ++i) {
        const ref::Vec r = lin(y.row(i), h.input_proj);
        s.v.insert(s.v.end(), r.begin(), r.end());
        c[i] = ref::add(lin(z.row(i), h.cond_embed), te);
    }
    for (const auto& blk : h.blocks) {
        std::vector<ref::Vec> m(n);
        ref::Mat q{n, w, {}}, k{n, w, {}}, v{n, w, {}};
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = lin(ref::map(lin(c[i], blk.ada1), ref::silu), blk.ada2);
            const ref::Vec qkv = lin(ref::modulate(ref::layer_norm(s.row(i)), ref::slice(m[i], w, w), ref::slice(m[i], 0, w)), blk.qkv);
            q.v.insert(q.v.end(), qkv.begin(), qkv.begin() + w);
            k.v.insert(k.v.end(), qkv.begin() + w, qkv.begin() + 2 * w);
            v.v.insert(v.v.end(), qkv.begin() + 2 * w, qkv.end());
        }
        const ref::Mat att = ref::attention(q, k, v, h.heads);
        ref::Mat next{n, w, {}};
        for (std::size_t i = 0; i < n; ++i) {
            ref::Vec a = ref::gated(s.row(i), ref::slice(m[i], 2 * w, w), lin(att.row(i), blk.proj));
            a = ref::gated(a, ref::slice(m[i], 5 * w, w),
                           ffn(ref::modulate(ref::layer_norm(a), ref::slice(m[i], 4 * w, w), ref::slice(m[i], 3 * w, w)), blk.ffn));
            next.v.insert(next.v.end(), a.begin(), a.end());
        }
        s = next;
    }
    ref::Mat out{n, 0, {}};
    for (std::size_t i = 0; i < n; ++i) {
        const ref::Vec o = lin(s.row(i), h.output_proj);
        out.cols = o.size();
        out.v.insert(out.v.end(), o.begin(), o.end());
    }
    return out;
}

struct MlpFixture {
    nn::ParamStore store;
    Rng rng{1, Stream::init};
    MlpHead head;
    MlpFixture(std::size_t depth, double noise) : head(store, "h", 4, 6, 8, depth, 2, rng) {
        if (noise > 0) ref::randomize(store, rng, noise);
    }
};

struct DitFixture {
    nn::ParamStore store;
    Rng rng{2, Stream::init};
    DitHead head;
    DitFixture(std::size_t depth, double noise) : head(store, "h", 4, 6, 8, depth, 2, 2, rng) {
        if (noise > 0) ref::randomize(store, rng, noise);
    }
};

}  // namespace

TEST(NoiseSchedule, CosineInvariants) {
    for (NoiseKind kind : {NoiseKind::cosine, NoiseKind::linear}) {
        const NoiseSchedule s(kind, 1000);
        for (std::size_t t = 1; t <= 1000; ++t) {
            EXPECT_GT(s.beta(t), 0.0);
            EXPECT_LT(s.beta(t), 1.0);
            if (t > 1) {
                EXPECT_GE(s.beta(t), s.beta(t - 1));
                EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
            }
        }
        EXPECT_LT(s.alpha_bar(1000), 1e-3);
        EXPECT_GT(s.alpha_bar(1), 0.999);
    }
}

TEST(NoiseSchedule, RespacedEndpointsAndErrors) {
    const NoiseSchedule s(NoiseKind::cosine, 1000);
    EXPECT_EQ(s.respaced(1), (std::vector<std::size_t>{1000}));
    const auto ts = s.respaced(100);
    EXPECT_EQ(ts.size(), 100u);
    EXPECT_EQ(ts.front(), 1u);
    EXPECT_EQ(ts.back(), 1000u);
    EXPECT_EQ(s.respaced(1000).size(), 1000u);
    EXPECT_THROW(s.respaced(0), ConfigError);
    EXPECT_THROW(s.respaced(1001), ConfigError);
}

TEST(AddNoise, Limits) {
    const NoiseSchedule s(NoiseKind::cosine, 1000);
    const std::vector<double> x{0.5, -2.0}, eps{1.0, 1.0};
    const auto y = add_noise(s, x, 1, eps);
    EXPECT_NEAR(y[0], 0.5, 0.02);
    EXPECT_NEAR(y[1], -2.0, 0.02);
    const std::vector<double> two{2.0}, zero{0.0};
    for (std::size_t t : {10u, 500u, 990u}) EXPECT_DOUBLE_EQ(add_noise(s, two, t, zero)[0], 2.0 * std::sqrt(s.alpha_bar(t)));
    EXPECT_THROW(add_noise(s, x, 0, eps), ConfigError);
    EXPECT_THROW(add_noise(s, x, 1001, eps), ConfigError);
}

TEST(AddNoise, QuarterAlphaBarHalvesSignal) {
    // Use the step whose alpha_bar is closest to 0.25.
    const NoiseSchedule s(NoiseKind::cosine, 1000);
    std::size_t best = 1;
    for (std::size_t t = 1; t <= 1000; ++t)
        if (std::abs(s.alpha_bar(t) - 0.25) < std::abs(s.alpha_bar(best) - 0.25)) best = t;
    const std::vector<double> x{2.0}, eps{0.0};
    EXPECT_NEAR(add_noise(s, x, best, eps)[0], 1.0, 2e-3);
}

TEST(AddNoise, MonteCarloVariance) {
    const NoiseSchedule s(NoiseKind::cosine, 1000);
    Rng rng(3, Stream::noise);
    for (std::size_t t : {50u, 400u, 800u}) {
        const std::size_t n = 100000;
        std::vector<double> x(n), eps(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = 2.0 * rng.normal();
            eps[i] = rng.normal();
        }
        const auto y = add_noise(s, x, t, eps);
        double m = 0, v = 0;
        for (double e : y) m += e;
        m /= n;
        for (double e : y) v += (e - m) * (e - m);
        v /= n;
        const double expect = s.alpha_bar(t) * 4.0 + (1.0 - s.alpha_bar(t));
        EXPECT_NEAR(v / expect, 1.0, 0.02) << t;
    }
}

TEST(MlpHead, PermutationEquivariance) {
    MlpFixture f(2, 0.3);
    Rng xr(4, Stream::eval);
    const Tensor x = ref::randn({5, 4}, xr), z = ref::randn({5, 6}, xr);
    const std::vector<double> t{1, 20, 300, 600, 999};
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> tp(5);
    for (std::size_t i = 0; i < 5; ++i) tp[i] = t[perm[i]];
    const ref::Vec base = ref::values(f.head.predict(x, t, z));
    const Tensor out = f.head.predict(ops::take_rows(x, perm), tp, ops::take_rows(z, perm));
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.values()[i * 4 + j], base[perm[i] * 4 + j], 1e-14);
}

TEST(MlpHead, ChangingOneConditionLeavesOtherTokensBitwise) {
    MlpFixture f(2, 0.3);
    Rng xr(5, Stream::eval);
    const Tensor x = ref::randn({4, 4}, xr);
    Tensor z = ref::randn({4, 6}, xr);
    const std::vector<double> t{5, 5, 5, 5};
    const ref::Vec before = ref::values(f.head.predict(x, t, z));
    for (std::size_t j = 0; j < 6; ++j) z.mutable_values()[2 * 6 + j] += 1.0;
    const ref::Vec after = ref::values(f.head.predict(x, t, z));
    for (std::size_t i : {0u, 1u, 3u}) EXPECT_EQ(row(after, i, 4), row(before, i, 4));
    EXPECT_NE(row(after, 2, 4), row(before, 2, 4));
}

TEST(MlpHead, MatchesStraightLineReference) {
    MlpFixture f(1, 0.3);
    Rng xr(6, Stream::eval);
    const Tensor x = ref::randn({3, 4}, xr), z = ref::randn({3, 6}, xr);
    const std::vector<double> t{1, 250, 1000};
    const ref::Vec got = ref::values(f.head.predict(x, t, z));
    for (std::size_t i = 0; i < 3; ++i) {
        const ref::Vec e = mlp_reference(f.head, row(x.values(), i, 4), t[i], row(z.values(), i, 6));
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(got[i * 4 + j], e[j], 1e-12);
    }
}

TEST(MlpHead, CountMismatchRejected) {
    MlpFixture f(1, 0.0);
    const std::vector<double> t{1, 2};
    EXPECT_THROW(f.head.predict(Tensor(Shape{2, 4}), t, Tensor(Shape{3, 6})), DimensionError);
}

TEST(DitHead, NoBlocksIsPureProjection) {
    DitFixture f(0, 0.3);
    Rng xr(7, Stream::eval);
    const Tensor y = ref::randn({1, 4, 4}, xr), z = ref::randn({1, 4, 6}, xr);
    const std::vector<double> t{17};
    const ref::Vec got = ref::values(f.head.predict(y, t, z));
    for (std::size_t i = 0; i < 4; ++i) {
        const ref::Vec e = lin(lin(row(y.values(), i, 4), f.head.input_proj), f.head.output_proj);
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(got[i * 4 + j], e[j], 1e-13);
    }
}

TEST(DitHead, ConditionsCoupleAcrossTokens) {
    DitFixture f(1, 0.3);
    Rng xr(8, Stream::eval);
    const Tensor y = ref::randn({1, 4, 4}, xr);
    Tensor z = ref::randn({1, 4, 6}, xr);
    const std::vector<double> t{100};
    const ref::Vec before = ref::values(f.head.predict(y, t, z));
    for (std::size_t j = 0; j < 6; ++j) z.mutable_values()[3 * 6 + j] += 1.0;
    const ref::Vec after = ref::values(f.head.predict(y, t, z));
    EXPECT_NE(row(after, 0, 4), row(before, 0, 4));
}

TEST(DitHead, ZeroedAttentionValuesRestoreLocality) {
    DitFixture f(2, 0.3);
    for (auto& blk : f.head.blocks) {
        Tensor q = blk.qkv.weight;
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t c = 16; c < 24; ++c) q.mutable_values()[i * 24 + c] = 0.0;
        for (double& v : Tensor(blk.proj.weight).mutable_values()) v = 0.0;
    }
    Rng xr(9, Stream::eval);
    const Tensor y = ref::randn({1, 4, 4}, xr);
    Tensor z = ref::randn({1, 4, 6}, xr);
    const std::vector<double> t{100};
    const ref::Vec before = ref::values(f.head.predict(y, t, z));
    for (std::size_t j = 0; j < 6; ++j) z.mutable_values()[1 * 6 + j] += 1.0;
    const ref::Vec after = ref::values(f.head.predict(y, t, z));
    for (std::size_t i : {0u, 2u, 3u}) EXPECT_EQ(row(after, i, 4), row(before, i, 4));
    EXPECT_NE(row(after, 1, 4), row(before, 1, 4));
}

TEST(DitHead, MatchesStraightLineReference) {
    DitFixture f(1, 0.3);
    Rng xr(10, Stream::eval);
    const Tensor y = ref::randn({2, 4, 4}, xr), z = ref::randn({2, 4, 6}, xr);
    const std::vector<double> t{3, 640};
    const ref::Vec got = ref::values(f.head.predict(y, t, z));
    for (std::size_t b = 0; b < 2; ++b) {
        const ref::Mat yb{4, 4, ref::Vec(y.values().begin() + b * 16, y.values().begin() + (b + 1) * 16)};
        const ref::Mat zb{4, 6, ref::Vec(z.values().begin() + b * 24, z.values().begin() + (b + 1) * 24)};
        const ref::Mat e = dit_reference(f.head, yb, t[b], zb);
        for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(got[b * 16 + k], e.v[k], 1e-12);
    }
}

TEST(DitHead, KnownPositionsCarryCleanValues) {
    DitFixture f(1, 0.3);
    Rng xr(11, Stream::eval);
    Tensor lat = ref::randn({1, 4, 4}, xr);
    const Tensor z = ref::randn({1, 4, 6}, xr), known_vals = ref::randn({1, 4, 4}, xr);
    const std::vector<double> t{50};
    const std::vector<std::uint8_t> known{1, 0, 1, 0};
    const ref::Vec before = ref::values(dit_head_predict(f.head, lat, t, z, known, known_vals));
    for (std::size_t j = 0; j < 4; ++j) lat.mutable_values()[j] += 3.0;  // position 0 is known
    EXPECT_EQ(ref::values(dit_head_predict(f.head, lat, t, z, known, known_vals)), before);
    EXPECT_THROW(dit_head_predict(f.head, lat, t, z, known, Tensor()), DimensionError);
}

TEST(DiffusionLoss, ZeroPredictorGivesUnitMeanSquare) {
    // Output projections start at zero, so eps_hat == 0 and the loss is the
    // mean of eps^2 over tokens and entries: 1 in expectation.
    MlpFixture f(1, 0.0);
    Rng xr(12, Stream::eval), nr(13, Stream::noise);
    for (std::size_t m : {5000u, 10000u}) {
        const Tensor x = ref::randn({m, 4}, xr), z = ref::randn({m, 6}, xr);
        EXPECT_NEAR(mlp_diffusion_loss(f.head, NoiseSchedule(NoiseKind::cosine, 1000), z, x, 4, nr).item(), 1.0, 0.02) << m;
    }
    DitFixture g(1, 0.0);
    const Tensor x = ref::randn({512, 4, 4}, xr), z = ref::randn({512, 4, 6}, xr);
    std::vector<std::uint8_t> mask(2048, 1);
    EXPECT_NEAR(dit_diffusion_loss(g.head, NoiseSchedule(NoiseKind::cosine, 1000), z, x, mask, 8, nr).item(), 1.0, 0.02);
}

TEST(DiffusionLoss, EmptySupervisionIsZeroWithWarning) {
    DitFixture f(1, 0.3);
    const std::uint64_t before = empty_loss_warnings();
    std::vector<std::uint8_t> mask(4, 0);
    Rng nr(14, Stream::noise);
    const Tensor loss = dit_diffusion_loss(f.head, NoiseSchedule(NoiseKind::cosine, 1000), Tensor(Shape{1, 4, 6}), Tensor(Shape{1, 4, 4}),
                                           mask, 1, nr);
    EXPECT_EQ(loss.item(), 0.0);
    EXPECT_EQ(empty_loss_warnings(), before + 1);
}

TEST(DiffusionLoss, GradientIntoConditionsMatchesFiniteDifferences) {
    MlpFixture f(1, 0.3);
    const NoiseSchedule sched(NoiseKind::cosine, 1000);
    Rng xr(15, Stream::eval);
    Tensor z = ref::randn({5, 6}, xr);
    const Tensor x = ref::randn({5, 4}, xr);
    const auto r = check_gradients(
        [&] {
            Rng nr(16, Stream::noise);
            return mlp_diffusion_loss(f.head, sched, z, x, 2, nr);
        },
        {z}, 100, xr);
    EXPECT_LT(r.rel_error, 1e-6);
}

TEST(Cfg, ScaleOneIsConditionalBitwise) {
    const std::vector<double> c{0.1, -3.7, 1e-17}, u{5.0, 2.0, -1.0};
    EXPECT_EQ(cfg_combine(c, u, 1.0), c);
    const auto g = cfg_combine(c, u, 2.0);
    EXPECT_DOUBLE_EQ(g[0], 5.0 + 2.0 * (0.1 - 5.0));
}

TEST(Sampler, GuidanceAtScaleOneReproducesUnguided) {
    MlpFixture f(1, 0.3);
    const NoiseSchedule sched(NoiseKind::cosine, 1000);
    Rng xr(17, Stream::eval);
    const Tensor zc = ref::randn({3, 6}, xr), zu = ref::randn({3, 6}, xr);
    SamplerOptions opts;
    opts.steps = 20;
    auto run = [&](const Guidance& g) {
        std::vector<Rng> rngs;
        for (std::size_t i = 0; i < 3; ++i) rngs.push_back(Rng(18, Stream::noise).fork(i));
        std::vector<Rng*> ptrs;
        for (Rng& r : rngs) ptrs.push_back(&r);
        return sample_mlp_head(f.head, sched, zc, g, opts, ptrs);
    };
    EXPECT_EQ(run(Guidance{zu, 1.0}), run(Guidance{}));
    EXPECT_NE(run(Guidance{zu, 3.0}), run(Guidance{}));
    EXPECT_EQ(run(Guidance{zu, 3.0}), run(Guidance{zu, 3.0}));
}

TEST(Sampler, DitKeepsKnownValuesAndIsDeterministic) {
    DitFixture f(1, 0.3);
    const NoiseSchedule sched(NoiseKind::cosine, 1000);
    Rng xr(19, Stream::eval);
    const Tensor zc = ref::randn({1, 4, 6}, xr);
    const std::vector<std::uint8_t> known{0, 1, 0, 0};
    const ref::Vec kv = ref::values(ref::randn({1, 4, 4}, xr));
    SamplerOptions opts;
    opts.steps = 10;
    auto run = [&] {
        Rng r(20, Stream::noise);
        Rng* p[1] = {&r};
        return sample_dit_head(f.head, sched, zc, Guidance{}, known, kv, opts, p);
    };
    const auto out = run();
    EXPECT_EQ(out, run());
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out[4 + j], kv[4 + j]);
}

TEST(Sampler, ZeroStepsRejected) {
    MlpFixture f(1, 0.0);
    SamplerOptions opts;
    opts.steps = 0;
    Rng r(21, Stream::noise);
    Rng* p[1] = {&r};
    EXPECT_THROW(sample_mlp_head(f.head, NoiseSchedule(NoiseKind::cosine, 1000), Tensor(Shape{1, 6}), Guidance{}, opts, p), ConfigError);
}

TEST(Sampler, ClippedOutputStaysInBounds) {
    MlpFixture f(1, 0.5);
    SamplerOptions opts;
    opts.steps = 25;
    opts.bounds = TokenBounds{std::vector<double>(4, -1.0), std::vector<double>(4, 1.0)};
    std::vector<Rng> rngs;
    for (std::size_t i = 0; i < 16; ++i) rngs.push_back(Rng(22, Stream::noise).fork(i));
    std::vector<Rng*> ptrs;
    for (Rng& r : rngs) ptrs.push_back(&r);
    Rng xr(23, Stream::eval);
    // The last step is noise-free and interpolates toward a clipped x0 with
    // weight 1, so the output itself is within the clip range.
    for (double v : sample_mlp_head(f.head, NoiseSchedule(NoiseKind::cosine, 1000), ref::randn({16, 6}, xr), Guidance{}, opts, ptrs)) {
        EXPECT_GE(v, -1.0 - 1e-12);
        EXPECT_LE(v, 1.0 + 1e-12);
    }
}
