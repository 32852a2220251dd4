// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>

#include "himar/checkpoint.hpp"
#include "himar/config.hpp"
#include "himar/dataset.hpp"
#include "himar/errors.hpp"
#include "himar/generate.hpp"
#include "himar/model.hpp"
#include "himar/train.hpp"
#include "reference.hpp"

using namespace himar;

namespace {

ModelConfig small_model(PivotMode pivot = PivotMode::conditional) {
    ModelConfig m;
    m.image_size = 8;
    m.patch_size = 2;
    m.n_classes = 3;
    m.depth = 1;
    m.width = 16;
    m.heads = 2;
    m.ffn_mult = 2;
    m.head1_depth = 1;
    m.head1_width = 16;
    m.head2_depth = 1;
    m.head2_width = 16;
    m.head2_heads = 2;
    m.head_ffn_mult = 2;
    m.pivot_mode = pivot;
    return m;
}

Dataset small_data(std::size_t count, std::uint64_t seed) {
    Dataset ds{8, 8, 1, 3, {}, {}};
    Rng rng(seed, Stream::data);
    for (std::size_t i = 0; i < count; ++i) {
        Image img(8, 8, 1);
        for (double& p : img.pixels) p = std::round(255.0 * rng.uniform()) / 255.0;
        ds.images.push_back(img);
        ds.labels.push_back(i % 3);
    }
    return ds;
}

TrainConfig small_train() {
    TrainConfig t;
    t.lr = 1e-3;
    t.batch_size = 4;
    t.max_steps = 10;
    t.ema_momentum = 0.9;
    t.seed = 5;
    return t;
}

GenerateConfig small_generate() {
    GenerateConfig g;
    g.steps1 = 2;
    g.steps2 = 3;
    g.sample_steps1 = 5;
    g.sample_steps2 = 4;
    g.batch_size = 4;
    return g;
}

TokenBatch batch_of(const ModelConfig& cfg, const Dataset& ds, std::size_t n) {
    return make_token_batch(cfg, std::span(ds.images).first(n), std::span(ds.labels).first(n), NormStats{{0.5}, {0.3}});
}

double grad_norm(const Tensor& t) {
    double s = 0;
    for (double g : t.grad()) s += g * g;
    return std::sqrt(s);
}

bool has_prefix(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

std::vector<std::vector<double>> params_of(const HiMarModel& m) { return m.store.snapshot(); }

}  // namespace

TEST(AdamW, SingleStepMatchesClosedForm) {
    nn::ParamStore store;
    Tensor w = store.add("w", Tensor(Shape{3}, std::vector<double>{1.0, -2.0, 0.5}), true);
    Tensor b = store.add("b", Tensor(Shape{1}, std::vector<double>{0.25}), false);
    const std::vector<double> gw{0.1, -3.0, 0.0};
    std::copy(gw.begin(), gw.end(), w.mutable_grad().begin());
    b.mutable_grad()[0] = 2.0;
    TrainConfig cfg;
    cfg.weight_decay = 0.1;
    AdamW opt(store);
    const double lr = 0.01;
    opt.step(store, cfg, lr);
    // After one step mhat = g and vhat = g^2, so the update is lr * g / (|g| + eps).
    for (std::size_t k = 0; k < 3; ++k) {
        const double x0 = std::vector<double>{1.0, -2.0, 0.5}[k];
        const double expect = x0 * (1.0 - lr * 0.1) - lr * gw[k] / (std::abs(gw[k]) + cfg.adam_eps);
        EXPECT_NEAR(w.values()[k], expect, 1e-15);
    }
    EXPECT_NEAR(b.values()[0], 0.25 - lr * 2.0 / (2.0 + cfg.adam_eps), 1e-15);
}

TEST(AdamW, DecayOnlyShrinksWeights) {
    nn::ParamStore store;
    Tensor w = store.add("w", Tensor(Shape{2}, std::vector<double>{3.0, -4.0}), true);
    TrainConfig cfg;
    cfg.weight_decay = 0.5;
    AdamW opt(store);
    opt.step(store, cfg, 0.1);
    EXPECT_DOUBLE_EQ(w.values()[0], 3.0 * 0.95);
    EXPECT_DOUBLE_EQ(w.values()[1], -4.0 * 0.95);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
    nn::ParamStore store;
    Tensor w = store.add("w", Tensor(Shape{2}, std::vector<double>{3.0, -4.0}), false);
    TrainConfig cfg;
    AdamW opt(store);
    for (int i = 0; i < 3; ++i) opt.step(store, cfg, 0.1);
    EXPECT_EQ(ref::values(w), (std::vector<double>{3.0, -4.0}));
}

TEST(Ema, Extremes) {
    nn::ParamStore store;
    Tensor w = store.add("w", Tensor(Shape{2}, std::vector<double>{1.0, 2.0}), true);
    Ema keep(store, 1.0), follow(store, 0.0);
    w.mutable_values()[0] = 7.0;
    keep.update(store);
    follow.update(store);
    EXPECT_EQ(keep.shadow[0], (std::vector<double>{1.0, 2.0}));
    EXPECT_EQ(follow.shadow[0], (std::vector<double>{7.0, 2.0}));
    EXPECT_THROW(Ema(store, 1.5), ConfigError);
}

TEST(Ema, TwoStepsByHandAndConvexHull) {
    nn::ParamStore store;
    Tensor w = store.add("w", Tensor(Shape{1}, std::vector<double>{0.0}), true);
    Ema ema(store, 0.9);
    w.mutable_values()[0] = 1.0;
    ema.update(store);
    w.mutable_values()[0] = 2.0;
    ema.update(store);
    EXPECT_NEAR(ema.shadow[0][0], 0.9 * 0.1 + 0.1 * 2.0, 1e-15);

    Rng rng(1, Stream::eval);
    double lo = 0.0, hi = 0.0;
    Ema hull(store, 0.7);
    w.mutable_values()[0] = 0.0;
    hull.shadow[0][0] = 0.0;
    for (int i = 0; i < 200; ++i) {
        const double x = rng.normal();
        w.mutable_values()[0] = x;
        lo = std::min(lo, x);
        hi = std::max(hi, x);
        hull.update(store);
        ASSERT_GE(hull.shadow[0][0], lo);
        ASSERT_LE(hull.shadow[0][0], hi);
    }
}

TEST(LearningRate, LinearWarmupThenConstant) {
    TrainConfig cfg;
    cfg.lr = 8e-4;
    cfg.warmup_fraction = 0.25;
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 0, 40), 8e-4 / 10);
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 4, 40), 8e-4 / 2);
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 9, 40), 8e-4);
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 39, 40), 8e-4);
    cfg.warmup_fraction = 0.0;
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 0, 40), 8e-4);
}

TEST(PlannedSteps, EpochsOrCap) {
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.epochs = 3;
    EXPECT_EQ(planned_steps(cfg, 100), 21u);
    cfg.max_steps = 5;
    EXPECT_EQ(planned_steps(cfg, 100), 5u);
}

TEST(Trainer, EpochsArePermutations) {
    HiMarModel model(small_model(), 1);
    const Dataset ds = small_data(12, 2);
    TrainConfig t = small_train();
    Trainer tr(model, t, ds, NormStats::identity(1));
    std::vector<int> seen(12, 0);
    for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t i : tr.batch_indices(s)) ++seen[i];
    for (int c : seen) EXPECT_EQ(c, 1);
    EXPECT_NE(tr.batch_indices(0), tr.batch_indices(3));
}

TEST(Trainer, RejectsMismatchedData) {
    HiMarModel model(small_model(), 1);
    Dataset ds = make_shapes_dataset(4, 1);
    EXPECT_THROW(Trainer(model, small_train(), ds, NormStats::identity(1)), ConfigError);
}

TEST(JointLoss, DeterministicGivenSeedAndStep) {
    HiMarModel model(small_model(), 3);
    const Dataset ds = small_data(4, 4);
    const TokenBatch batch = batch_of(model.cfg, ds, 4);
    const TrainConfig t = small_train();
    const JointLoss a = joint_loss(model, batch, t, 9, 2), b = joint_loss(model, batch, t, 9, 2), c = joint_loss(model, batch, t, 9, 3);
    EXPECT_EQ(a.total.item(), b.total.item());
    EXPECT_NE(a.total.item(), c.total.item());
    EXPECT_TRUE(std::isfinite(a.l1_value()));
    EXPECT_TRUE(std::isfinite(a.l2_value()));
    EXPECT_NEAR(a.total.item(), a.l1_value() + a.l2_value(), 1e-14);
}

TEST(JointLoss, GradientRouting) {
    HiMarModel model(small_model(), 3);
    Rng init_rng(4, Stream::init);
    ref::randomize(model.store, init_rng, 0.05);
    const Dataset ds = small_data(4, 4);
    const TokenBatch batch = batch_of(model.cfg, ds, 4);
    TrainConfig t = small_train();
    const LossOverrides o{1.0, 1.0, 0.0};

    auto grads_from = [&](bool first) {
        model.store.zero_grad();
        const JointLoss l = joint_loss(model, batch, t, 1, 0, o);
        backward(first ? l.l1 : l.l2);
        std::map<std::string, double> out;
        for (const auto& p : model.store.params()) out[p.name] = grad_norm(p.tensor);
        return out;
    };
    const auto g1 = grads_from(true), g2 = grads_from(false);
    for (const auto& [name, n1] : g1) {
        const double n2 = g2.at(name);
        if (has_prefix(name, "head1.")) {
            EXPECT_EQ(n2, 0.0) << name;
        } else if (has_prefix(name, "head2.")) {
            EXPECT_EQ(n1, 0.0) << name;
        }
    }
    EXPECT_GT(g1.at("backbone.input_proj.weight"), 0.0);
    EXPECT_GT(g2.at("backbone.input_proj.weight"), 0.0);
    EXPECT_GT(g1.at("head1.output_proj.weight"), 0.0);
    EXPECT_GT(g2.at("head2.output_proj.weight"), 0.0);
    // Phase-2 gradient reaches the low-scale positions only through the pivot.
    EXPECT_GT(g2.at("backbone.pos.scale0.grid_row"), 0.0);

    model.cfg.detach_pivot = true;
    const auto g2d = grads_from(false);
    EXPECT_EQ(g2d.at("backbone.pos.scale0.grid_row"), 0.0);
}

TEST(JointLoss, SingleScaleWithoutPivots) {
    HiMarModel model(small_model(PivotMode::none), 3);
    EXPECT_FALSE(model.has_phase1());
    for (const auto& p : model.store.params()) EXPECT_FALSE(has_prefix(p.name, "head1.")) << p.name;
    const Dataset ds = small_data(4, 4);
    const JointLoss l = joint_loss(model, batch_of(model.cfg, ds, 4), small_train(), 1, 0);
    EXPECT_FALSE(l.l1.defined());
    EXPECT_EQ(l.total.item(), l.l2_value());
}

TEST(JointLoss, NonFiniteLossNamesThePhase) {
    HiMarModel model(small_model(), 3);
    Tensor w = model.store.find("head1.output_proj.bias").tensor;
    w.mutable_values()[0] = std::nan("");
    const Dataset ds = small_data(4, 4);
    try {
        joint_loss(model, batch_of(model.cfg, ds, 4), small_train(), 1, 0);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("phase-1"), std::string::npos);
    }
}

TEST(Training, LossDecreasesOnRepeatedBatch) {
    HiMarModel model(small_model(), 3);
    const Dataset ds = small_data(4, 6);
    TrainConfig t = small_train();
    t.max_steps = 60;
    t.warmup_fraction = 0.0;
    t.class_drop = 0.0;
    Trainer tr(model, t, ds, NormStats{{0.5}, {0.3}});
    double first = 0, last = 0;
    for (int i = 0; i < 60; ++i) {
        const StepRecord r = tr.step();
        if (i < 10) first += r.l1 + r.l2;
        if (i >= 50) last += r.l1 + r.l2;
    }
    EXPECT_LT(last, first);
}

TEST(Generation, TerminatesWithEverythingCommitted) {
    HiMarModel model(small_model(), 7);
    const GenerateConfig g = small_generate();
    const std::vector<std::size_t> ids{0, 1, 2};
    const GenerateOutput out = generate(model, ids, g, NormStats{{0.5}, {0.3}}, 11);
    ASSERT_EQ(out.images.size(), 3u);
    EXPECT_EQ(out.trace.counts1.size(), g.steps1);
    EXPECT_EQ(out.trace.counts2.size(), g.steps2);
    for (std::size_t m : out.trace.final_masked1) EXPECT_EQ(m, 0u);
    for (std::size_t m : out.trace.final_masked2) EXPECT_EQ(m, 0u);
    for (const Image& img : out.images) {
        EXPECT_EQ(img.height, 8u);
        for (double p : img.pixels) EXPECT_TRUE(std::isfinite(p));
    }
}

TEST(Generation, FixedSeedIsBitwiseReproducible) {
    HiMarModel model(small_model(), 7);
    const std::vector<std::size_t> ids{2, 0};
    const NormStats st{{0.5}, {0.3}};
    const auto a = generate(model, ids, small_generate(), st, 11), b = generate(model, ids, small_generate(), st, 11),
               c = generate(model, ids, small_generate(), st, 12);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a.images[i].pixels, b.images[i].pixels);
        EXPECT_NE(a.images[i].pixels, c.images[i].pixels);
    }
}

TEST(Generation, SplittingARequestDoesNotChangeImages) {
    HiMarModel model(small_model(), 7);
    const NormStats st{{0.5}, {0.3}};
    const std::vector<std::size_t> ids{0, 1, 2}, head{0}, tail{1, 2};
    const auto whole = generate(model, ids, small_generate(), st, 11);
    const auto a = generate(model, head, small_generate(), st, 11, 0), b = generate(model, tail, small_generate(), st, 11, 1);
    const std::vector<const Image*> parts{&a.images[0], &b.images[0], &b.images[1]};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < parts[i]->pixels.size(); ++k) EXPECT_NEAR(whole.images[i].pixels[k], parts[i]->pixels[k], 1e-12);
}

TEST(Generation, GuidanceSwitches) {
    HiMarModel model(small_model(), 7);
    Rng init_rng(8, Stream::init);
    ref::randomize(model.store, init_rng, 0.05);
    const NormStats st{{0.5}, {0.3}};
    const std::vector<std::size_t> ids{1};
    GenerateConfig g = small_generate();
    g.cfg_scale1 = g.cfg_scale2 = 3.0;
    const auto guided = generate(model, ids, g, st, 4);
    EXPECT_TRUE(guided.trace.guided1);
    EXPECT_TRUE(guided.trace.guided2);

    GenerateConfig off = g;
    off.cfg_phase2 = false;
    const auto no2 = generate(model, ids, off, st, 4);
    EXPECT_FALSE(no2.trace.guided2);
    GenerateConfig unit2 = g;
    unit2.cfg_scale2 = 1.0;
    EXPECT_EQ(no2.images[0].pixels, generate(model, ids, unit2, st, 4).images[0].pixels);
    EXPECT_NE(no2.images[0].pixels, guided.images[0].pixels);
}

TEST(Generation, Errors) {
    HiMarModel model(small_model(), 7);
    const std::vector<std::size_t> bad{3};
    EXPECT_THROW(generate(model, bad, small_generate(), NormStats::identity(1), 1), ConfigError);
    GenerateConfig g = small_generate();
    g.steps1 = 5;  // only 4 low-resolution tokens
    const std::vector<std::size_t> ok{0};
    EXPECT_THROW(generate(model, ok, g, NormStats::identity(1), 1), ConfigError);
    EXPECT_TRUE(generate(model, std::vector<std::size_t>{}, small_generate(), NormStats::identity(1), 1).images.empty());
}

TEST(Generation, ManyCyclesClasses) {
    HiMarModel model(small_model(), 7);
    std::vector<std::size_t> labels;
    const auto imgs = generate_many(model, 7, small_generate(), NormStats::identity(1), 3, &labels);
    EXPECT_EQ(imgs.size(), 7u);
    EXPECT_EQ(labels, (std::vector<std::size_t>{0, 1, 2, 0, 1, 2, 0}));
}

TEST(Checkpoint, RoundTripIsBitwise) {
    RunConfig rc;
    rc.model = small_model();
    HiMarModel model(rc.model, 5);
    Rng init_rng(6, Stream::init);
    ref::randomize(model.store, init_rng, 0.1);
    const NormStats st{{0.25}, {0.5}};
    const Checkpoint ck = decode_checkpoint(encode_checkpoint(capture_checkpoint(rc, model, st)));
    EXPECT_EQ(ck.config.serialize(), rc.serialize());
    EXPECT_EQ(ck.stats.mean, st.mean);
    const auto loaded = model_from_checkpoint(ck, false);
    EXPECT_EQ(params_of(*loaded), params_of(model));
}

TEST(Checkpoint, CorruptionIsReported) {
    RunConfig rc;
    rc.model = small_model();
    HiMarModel model(rc.model, 5);
    std::string bytes = encode_checkpoint(capture_checkpoint(rc, model, NormStats::identity(1)));
    std::string bumped = bytes;
    bumped[4] = static_cast<char>(kCheckpointVersion + 1);
    try {
        decode_checkpoint(bumped);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
    EXPECT_THROW(decode_checkpoint("NOPE" + bytes.substr(4)), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);

    Checkpoint ck = decode_checkpoint(bytes);
    ck.config.model.width = 32;
    EXPECT_THROW(model_from_checkpoint(ck, false), FormatError);
}

TEST(Checkpoint, ResumeReproducesUninterruptedRun) {
    RunConfig rc;
    rc.model = small_model();
    rc.train = small_train();
    const Dataset ds = small_data(8, 3);
    const NormStats st{{0.5}, {0.3}};

    HiMarModel straight(rc.model, 1);
    Trainer ta(straight, rc.train, ds, st);
    std::vector<StepRecord> recs;
    while (!ta.finished()) recs.push_back(ta.step());

    HiMarModel first(rc.model, 1);
    Trainer tb(first, rc.train, ds, st);
    for (int i = 0; i < 4; ++i) tb.step();
    const Checkpoint ck = decode_checkpoint(encode_checkpoint(capture_checkpoint(rc, first, st, &tb)));
    EXPECT_EQ(ck.step, 4u);
    const auto resumed = model_from_checkpoint(ck, false);
    Trainer tc(*resumed, rc.train, ds, st);
    restore_trainer(tc, ck);
    for (std::size_t i = 4; i < recs.size(); ++i) {
        const StepRecord r = tc.step();
        EXPECT_EQ(r.step, recs[i].step);
        EXPECT_EQ(r.l1, recs[i].l1);
        EXPECT_EQ(r.l2, recs[i].l2);
        EXPECT_EQ(r.lr, recs[i].lr);
    }
    EXPECT_EQ(params_of(*resumed), params_of(straight));
    EXPECT_EQ(tc.ema.shadow, ta.ema.shadow);
    EXPECT_TRUE(tc.finished());
}

TEST(Dataset, RawRoundTripAndSlice) {
    const Dataset ds = make_shapes_dataset(20, 3);
    EXPECT_EQ(ds.height, 32u);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(ds.labels[i], i % 10);
    const auto path = std::filesystem::temp_directory_path() / "himar_test_data.bin";
    write_dataset(path.string(), ds);
    const Dataset back = read_dataset(path.string());
    std::filesystem::remove(path);
    ASSERT_EQ(back.size(), 20u);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(back.images[i].pixels, ds.images[i].pixels);
    const Dataset s = ds.slice(5, 3);
    EXPECT_EQ(s.labels, (std::vector<std::size_t>{5, 6, 7}));
    EXPECT_THROW(ds.slice(19, 2), ConfigError);
}

TEST(Dataset, ShapesArePureFunctionsOfSeedAndIndex) {
    EXPECT_EQ(render_shape(4, 9, 17).pixels, render_shape(4, 9, 17).pixels);
    EXPECT_NE(render_shape(4, 9, 17).pixels, render_shape(4, 9, 18).pixels);
    EXPECT_EQ(make_shapes_dataset(12, 9).images[11].pixels, render_shape(1, 9, 11).pixels);
}

TEST(NetPbm, HeadersAndRoundTrip) {
    Image rgb(2, 3, 3, 1.0);
    rgb.pixels[0] = -0.5;
    const std::string enc = encode_netpbm(rgb);
    EXPECT_EQ(enc.substr(0, 11), "P6\n3 2\n255\n");
    EXPECT_EQ(enc.size(), 11u + 18u);
    EXPECT_EQ(static_cast<unsigned char>(enc[11]), 0);
    EXPECT_EQ(static_cast<unsigned char>(enc[12]), 255);
    EXPECT_EQ(encode_netpbm(Image(4, 5, 1)).substr(0, 11), "P5\n5 4\n255\n");
    EXPECT_THROW(encode_netpbm(Image(2, 2, 2)), ConfigError);

    Image gray(3, 2, 1);
    gray.pixels = {0.0, 1.0 / 255, 0.5, 128.0 / 255, 1.0, 2.0};
    const auto path = std::filesystem::temp_directory_path() / "himar_test.pgm";
    write_netpbm(path.string(), gray);
    const Image back = read_netpbm(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(back.pixels, (std::vector<double>{0.0, 1.0 / 255, 128.0 / 255, 128.0 / 255, 1.0, 1.0}));
}

TEST(Config, SerializeParseRoundTrip) {
    for (const char* name : {"tiny", "b", "l", "h"}) {
        const RunConfig rc = RunConfig::preset(name);
        rc.validate();
        EXPECT_EQ(RunConfig::parse(rc.serialize(), RunConfig{}).serialize(), rc.serialize()) << name;
    }
}

TEST(Config, ParseRules) {
    const RunConfig base = RunConfig::preset("tiny");
    const RunConfig rc = RunConfig::parse("# comment\ntrain.lr = 0.002\n\ngenerate.cfg_phase2=false\nmodel.pivot_mode=visual\n", base);
    EXPECT_DOUBLE_EQ(rc.train.lr, 0.002);
    EXPECT_FALSE(rc.generate.cfg_phase2);
    EXPECT_EQ(rc.model.pivot_mode, PivotMode::visual);
    EXPECT_EQ(rc.model.width, base.model.width);
    EXPECT_THROW(RunConfig::parse("train.lr=1\ntrain.lr=2\n", base), ConfigError);
    EXPECT_THROW(RunConfig::parse("train.bogus=1\n", base), ConfigError);
    EXPECT_THROW(RunConfig::parse("train.lr\n", base), ConfigError);
    EXPECT_THROW(RunConfig::parse("train.batch_size=-3\n", base), ConfigError);
    EXPECT_THROW(RunConfig::preset("xl"), ConfigError);
    EXPECT_FALSE(config_key_docs().empty());
}

TEST(Config, ValidationCatchesInconsistentSizes) {
    RunConfig rc = RunConfig::preset("tiny");
    rc.model.width = 30;
    rc.model.heads = 4;
    EXPECT_THROW(rc.validate(), ConfigError);
    rc = RunConfig::preset("tiny");
    rc.model.image_size = 28;
    EXPECT_THROW(rc.validate(), ConfigError);
}
