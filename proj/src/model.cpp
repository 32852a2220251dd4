// SPDX-License-Identifier: Apache-2.0
#include "himar/model.hpp"

#include <cmath>

#include "himar/errors.hpp"
#include "himar/masking.hpp"

namespace himar {

HiMarModel::HiMarModel(const ModelConfig& c, std::uint64_t init_seed) : cfg(c) {
    cfg.validate();
    Rng rng(init_seed, Stream::init);
    backbone = Backbone(store, cfg, rng);
    const std::size_t d = cfg.token_dim();
    if (has_phase1()) head1 = MlpHead(store, "head1", d, cfg.width, cfg.head1_width, cfg.head1_depth, cfg.head_ffn_mult, rng);
    head2 = DitHead(store, "head2", d, cfg.width, cfg.head2_width, cfg.head2_depth, cfg.head2_heads, cfg.head_ffn_mult, rng);
    schedule = NoiseSchedule(cfg.noise, cfg.train_timesteps);
}

TokenBatch make_token_batch(const ModelConfig& cfg, std::span<const Image> images, std::span<const std::size_t> labels,
                            const NormStats& stats) {
    if (images.size() != labels.size() || images.empty()) throw DimensionError("batch needs one label per image and at least one image");
    const std::size_t b = images.size(), d = cfg.token_dim();
    const std::size_t nl = cfg.low_tokens(), nd = cfg.dense_tokens();
    std::vector<double> low, dense;
    low.reserve(b * nl * d);
    dense.reserve(b * nd * d);
    for (const Image& img : images) {
        if (img.height != cfg.image_size || img.width != cfg.image_size || img.channels != cfg.channels) {
            throw DimensionError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                                 std::to_string(img.channels) + ", model expects " + std::to_string(cfg.image_size) + "x" +
                                 std::to_string(cfg.image_size) + "x" + std::to_string(cfg.channels));
        }
        const ImagePyramid pyr = ImagePyramid::build(img, cfg.patch_size);
        const TokenGrid lg = patchify(pyr.low, cfg.patch_size, stats, 0);
        const TokenGrid dg = patchify(pyr.full, cfg.patch_size, stats, 1);
        low.insert(low.end(), lg.values.begin(), lg.values.end());
        dense.insert(dense.end(), dg.values.begin(), dg.values.end());
    }
    for (std::size_t l : labels) {
        if (l >= cfg.n_classes) throw ConfigError("label " + std::to_string(l) + " out of range");
    }
    return {std::vector<std::size_t>(labels.begin(), labels.end()), Tensor(Shape{b, nl, d}, std::move(low)),
            Tensor(Shape{b, nd, d}, std::move(dense))};
}

namespace {

// Per-sample random masks: flags [B * n] (1 = masked) and the matching [B, n, 1] tensor.
std::vector<std::uint8_t> sample_masks(std::size_t batch, std::size_t n, const RatioSampler& sampler, std::optional<double> forced,
                                       Rng& rng) {
    std::vector<std::uint8_t> flags(batch * n, 0);
    for (std::size_t b = 0; b < batch; ++b) {
        const double r = forced ? *forced : sampler.sample(rng);
        for (std::size_t pos : random_subset(n, masked_count_for_ratio(r, n), rng)) flags[b * n + pos] = 1;
    }
    return flags;
}

Tensor mask_tensor(const std::vector<std::uint8_t>& flags, std::size_t batch, std::size_t n) {
    std::vector<double> v(flags.begin(), flags.end());
    return Tensor(Shape{batch, n, 1}, std::move(v));
}

void check_finite(const Tensor& t, const char* what) {
    if (!std::isfinite(t.item())) throw NumericError(std::string(what) + " is not finite");
}

}  // namespace

JointLoss joint_loss(const HiMarModel& model, const TokenBatch& batch, const TrainConfig& tcfg, std::uint64_t seed, std::uint64_t step,
                     const LossOverrides& overrides) {
    const ModelConfig& cfg = model.cfg;
    const std::size_t b = batch.size();
    const std::size_t nl = cfg.low_tokens(), nd = cfg.dense_tokens();
    Rng cfg_rng = Rng(seed, Stream::cfg).fork(step);
    Rng mask_rng = Rng(seed, Stream::mask).fork(step);
    Rng noise_rng = Rng(seed, Stream::noise).fork(step);

    std::vector<std::size_t> ids(batch.labels);
    const double drop = overrides.class_drop.value_or(tcfg.class_drop);
    for (auto& id : ids) {
        if (cfg_rng.uniform() < drop) id = model.null_class();
    }

    JointLoss out;
    Tensor pivot;
    if (model.has_phase1()) {
        const auto flags1 = sample_masks(b, nl, tcfg.ratio1, overrides.ratio1, mask_rng);
        BackboneInput in1{ids, batch.low, mask_tensor(flags1, b, nl), 0, {}};
        const Tensor zs = model.backbone.forward(in1);
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < flags1.size(); ++r) {
            if (flags1[r]) rows.push_back(r);
        }
        const Tensor z_rows = ops::take_rows(zs, rows);
        const Tensor x_rows = ops::take_rows(batch.low, rows);
        out.l1 = mlp_diffusion_loss(model.head1, model.schedule, z_rows, x_rows, tcfg.head1_batch_mul, noise_rng);
        check_finite(out.l1, "phase-1 loss");
        if (cfg.pivot_mode == PivotMode::conditional) {
            pivot = cfg.detach_pivot ? zs.detach() : zs;
        } else {
            pivot = batch.low;
        }
    }

    const auto flags2 = sample_masks(b, nd, tcfg.ratio2, overrides.ratio2, mask_rng);
    BackboneInput in2{ids, batch.dense, mask_tensor(flags2, b, nd), 1, pivot};
    const Tensor zl = model.backbone.forward(in2);
    out.l2 = dit_diffusion_loss(model.head2, model.schedule, zl, batch.dense, flags2, tcfg.head2_batch_mul, noise_rng);
    check_finite(out.l2, "phase-2 loss");

    out.total = ops::scale(out.l2, tcfg.loss_weight2);
    if (out.l1.defined()) out.total = ops::add(ops::scale(out.l1, tcfg.loss_weight1), out.total);
    return out;
}

}  // namespace himar
