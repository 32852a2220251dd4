// SPDX-License-Identifier: Apache-2.0
#include "himar/generate.hpp"

#include <algorithm>

#include "himar/errors.hpp"
#include "himar/masking.hpp"
#include "himar/parallel.hpp"

namespace himar {

namespace {

Tensor state_tokens(const std::vector<MaskState>& states) {
    const std::size_t n = states.front().n, d = states.front().dim;
    std::vector<double> v;
    v.reserve(states.size() * n * d);
    for (const auto& s : states) v.insert(v.end(), s.values.begin(), s.values.end());
    return Tensor(Shape{states.size(), n, d}, std::move(v));
}

Tensor state_mask(const std::vector<MaskState>& states) {
    const std::size_t n = states.front().n;
    std::vector<double> v;
    v.reserve(states.size() * n);
    for (const auto& s : states) {
        for (std::uint8_t k : s.known) v.push_back(k ? 0.0 : 1.0);
    }
    return Tensor(Shape{states.size(), n, 1}, std::move(v));
}

}  // namespace

GenerateOutput generate(const HiMarModel& model, std::span<const std::size_t> class_ids, const GenerateConfig& gcfg,
                        const NormStats& stats, std::uint64_t seed, std::uint64_t first_index) {
    NoGradGuard no_grad;
    const ModelConfig& cfg = model.cfg;
    gcfg.validate();
    const std::size_t batch = class_ids.size();
    GenerateOutput out;
    if (batch == 0) return out;
    for (std::size_t id : class_ids) {
        if (id >= cfg.n_classes) throw ConfigError("unknown class id " + std::to_string(id) + " (model has " + std::to_string(cfg.n_classes) + " classes)");
    }
    if (stats.channels() != cfg.channels) throw DimensionError("normalization stats do not match the model channel count");
    const std::size_t d = cfg.token_dim(), nl = cfg.low_tokens(), nd = cfg.dense_tokens();

    const std::vector<std::size_t> ids(class_ids.begin(), class_ids.end());
    const std::vector<std::size_t> null_ids(batch, model.null_class());
    std::vector<Rng> mask_rngs, noise_rngs;
    for (std::size_t b = 0; b < batch; ++b) {
        mask_rngs.push_back(Rng(seed, Stream::mask).fork(first_index + b));
        noise_rngs.push_back(Rng(seed, Stream::noise).fork(first_index + b));
    }
    SamplerOptions opts1{gcfg.sample_steps1, gcfg.variance, {}};
    SamplerOptions opts2{gcfg.sample_steps2, gcfg.variance, {}};
    if (gcfg.clip_denoised) opts1.bounds = opts2.bounds = token_bounds(stats, cfg.patch_size);

    const bool guided1 = model.has_phase1() && gcfg.cfg_phase1 && gcfg.cfg_scale1 != 1.0;
    const bool guided2 = gcfg.cfg_phase2 && gcfg.cfg_scale2 != 1.0;
    out.trace.guided1 = guided1;
    out.trace.guided2 = guided2;

    Tensor pivot_c, pivot_u;
    if (model.has_phase1()) {
        const auto counts = inference_schedule(nl, gcfg.steps1);
        out.trace.counts1 = counts;
        std::vector<MaskState> states(batch, MaskState::all_masked(nl, d));
        const bool uncond_pivot = guided2 && cfg.pivot_mode == PivotMode::conditional;
        Tensor zs, zs_u;
        for (std::size_t k = 0; k < counts.size(); ++k) {
            const Tensor tokens = state_tokens(states), mask = state_mask(states);
            zs = model.backbone.forward({ids, tokens, mask, 0, {}});
            const bool last = k + 1 == counts.size();
            if (guided1 || (last && uncond_pivot)) zs_u = model.backbone.forward({null_ids, tokens, mask, 0, {}});

            std::vector<std::size_t> rows;
            std::vector<Rng*> row_rngs;
            std::vector<std::vector<std::size_t>> chosen(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                chosen[b] = choose_positions(states[b], counts[k], mask_rngs[b]);
                for (std::size_t p : chosen[b]) {
                    rows.push_back(b * nl + p);
                    row_rngs.push_back(&noise_rngs[b]);
                }
            }
            const Tensor z_cond = ops::take_rows(zs, rows);
            Guidance g{guided1 ? ops::take_rows(zs_u, rows) : Tensor(), gcfg.cfg_scale1};
            const auto vals = sample_mlp_head(model.head1, model.schedule, z_cond, g, opts1, row_rngs);
            std::size_t r = 0;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t p : chosen[b]) states[b].set(p, vals.data() + (r++) * d);
            }
        }
        for (const auto& s : states) out.trace.final_masked1.push_back(s.masked_count());
        if (cfg.pivot_mode == PivotMode::conditional) {
            pivot_c = zs;
            pivot_u = zs_u;
        } else {
            pivot_c = pivot_u = state_tokens(states);
        }
        const std::size_t side = cfg.low_side();
        for (const auto& s : states) out.low.push_back(TokenGrid{side, side, d, cfg.patch_size, 0, s.values});
    }

    const auto counts = inference_schedule(nd, gcfg.steps2);
    out.trace.counts2 = counts;
    std::vector<MaskState> states(batch, MaskState::all_masked(nd, d));
    std::vector<Rng*> grid_rngs;
    for (auto& r : noise_rngs) grid_rngs.push_back(&r);
    for (std::size_t k = 0; k < counts.size(); ++k) {
        const Tensor tokens = state_tokens(states), mask = state_mask(states);
        const Tensor zl = model.backbone.forward({ids, tokens, mask, 1, pivot_c});
        Guidance g{guided2 ? model.backbone.forward({null_ids, tokens, mask, 1, pivot_u}) : Tensor(), gcfg.cfg_scale2};
        std::vector<std::uint8_t> known;
        known.reserve(batch * nd);
        for (const auto& s : states) known.insert(known.end(), s.known.begin(), s.known.end());
        const auto vals = sample_dit_head(model.head2, model.schedule, zl, g, known, tokens.values(), opts2, grid_rngs);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t p : choose_positions(states[b], counts[k], mask_rngs[b])) states[b].set(p, vals.data() + (b * nd + p) * d);
        }
    }
    const std::size_t side = cfg.dense_side();
    for (const auto& s : states) {
        out.trace.final_masked2.push_back(s.masked_count());
        TokenGrid grid{side, side, d, cfg.patch_size, 1, s.values};
        out.images.push_back(unpatchify(grid, stats));
        out.dense.push_back(std::move(grid));
    }
    return out;
}

std::vector<Image> generate_many(const HiMarModel& model, std::size_t count, const GenerateConfig& gcfg, const NormStats& stats,
                                 std::uint64_t seed, std::vector<std::size_t>* labels) {
    const std::size_t chunk = std::max<std::size_t>(1, gcfg.batch_size);
    const std::size_t chunks = (count + chunk - 1) / chunk;
    std::vector<Image> images(count);
    std::vector<std::size_t> ids(count);
    for (std::size_t i = 0; i < count; ++i) ids[i] = i % model.cfg.n_classes;
    parallel_for(chunks, [&](std::size_t c) {
        const std::size_t begin = c * chunk, len = std::min(chunk, count - begin);
        auto res = generate(model, std::span(ids).subspan(begin, len), gcfg, stats, seed, begin);
        std::move(res.images.begin(), res.images.end(), images.begin() + static_cast<std::ptrdiff_t>(begin));
    });
    if (labels) *labels = ids;
    return images;
}

}  // namespace himar
