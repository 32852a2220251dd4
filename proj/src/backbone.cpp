// SPDX-License-Identifier: Apache-2.0
#include "himar/backbone.hpp"

#include <vector>

#include "himar/errors.hpp"

namespace himar {

namespace {

constexpr double kEmbedStd = 0.02;

// Learned 2-D factorized positions: row[r] + col[c] for a side x side grid.
Tensor grid_positions(const Tensor& rows, const Tensor& cols) {
    const std::size_t side = rows.dim(0);
    std::vector<std::size_t> r(side * side), c(side * side);
    for (std::size_t i = 0; i < side * side; ++i) {
        r[i] = i / side;
        c[i] = i % side;
    }
    return ops::add(ops::take_rows(rows, r), ops::take_rows(cols, c));
}

}  // namespace

SelfAttention::SelfAttention(nn::ParamStore& store, const std::string& name, std::size_t w, std::size_t h, Rng& rng)
    : width(w), heads(h) {
    if (w % h != 0) throw ConfigError(name + ": width " + std::to_string(w) + " not divisible by " + std::to_string(h) + " heads");
    qkv = nn::Linear(store, name + ".qkv", w, 3 * w, rng, nn::Init::xavier, false);
    proj = nn::Linear(store, name + ".proj", w, w, rng, nn::Init::xavier, false);
}

Tensor SelfAttention::operator()(const Tensor& x) const {
    const Tensor t = qkv(x);
    const Tensor q = ops::slice(t, -1, 0, width);
    const Tensor k = ops::slice(t, -1, width, width);
    const Tensor v = ops::slice(t, -1, 2 * width, width);
    return proj(ops::attention(q, k, v, heads));
}

ScaleAwareBlock::ScaleAwareBlock(nn::ParamStore& store, const std::string& name, std::size_t w, std::size_t heads,
                                 std::size_t ffn_mult, std::size_t scale_dim, Rng& rng)
    : width(w) {
    a = store.add(name + ".scale_affine.a", Tensor(Shape{scale_dim}, 1.0), false);
    b = store.add(name + ".scale_affine.b", Tensor(Shape{scale_dim}, 0.0), false);
    mod = nn::Linear(store, name + ".modulation", scale_dim, 6 * w, rng, nn::Init::zero);
    attn = SelfAttention(store, name + ".attn", w, heads, rng);
    ffn = nn::FeedForward(store, name + ".ffn", w, ffn_mult, rng);
}

Tensor ScaleAwareBlock::modulation(const Tensor& v) const { return mod(ops::add(ops::mul(a, v), b)); }

Tensor ScaleAwareBlock::operator()(const Tensor& z, const Tensor& v) const {
    const Tensor m = modulation(v);
    const Tensor alpha1 = ops::slice(m, -1, 0, width);
    const Tensor beta1 = ops::slice(m, -1, width, width);
    const Tensor gamma1 = ops::slice(m, -1, 2 * width, width);
    const Tensor alpha2 = ops::slice(m, -1, 3 * width, width);
    const Tensor beta2 = ops::slice(m, -1, 4 * width, width);
    const Tensor gamma2 = ops::slice(m, -1, 5 * width, width);
    const Tensor za = nn::gated_residual(z, gamma1, attn(nn::modulate(ops::layer_norm(z), beta1, alpha1)));
    return nn::gated_residual(za, gamma2, ffn(nn::modulate(ops::layer_norm(za), beta2, alpha2)));
}

ScaleEmbedding::ScaleEmbedding(nn::ParamStore& store, const std::string& name, ScaleVector k, std::size_t d, Rng& rng)
    : kind(k), dim(d) {
    switch (kind) {
        case ScaleVector::sinusoidal:
            fc1 = nn::Linear(store, name + ".fc1", dim, dim, rng);
            fc2 = nn::Linear(store, name + ".fc2", dim, dim, rng);
            break;
        case ScaleVector::learned:
            table = store.add(name + ".table", nn::normal_tensor(Shape{2, dim}, 1.0, rng), false);
            break;
        case ScaleVector::none:
            break;
    }
}

Tensor ScaleEmbedding::operator()(int scale_id) const {
    if (scale_id != 0 && scale_id != 1) throw ConfigError("scale id must be 0 (low) or 1 (dense), got " + std::to_string(scale_id));
    switch (kind) {
        case ScaleVector::sinusoidal:
            return fc2(ops::silu(fc1(ops::sinusoidal_embedding(static_cast<double>(scale_id), dim))));
        case ScaleVector::learned: {
            const std::size_t row[1] = {static_cast<std::size_t>(scale_id)};
            return ops::reshape(ops::take_rows(table, row), Shape{dim});
        }
        case ScaleVector::none:
            return Tensor(Shape{dim});
    }
    return {};
}

Backbone::Backbone(nn::ParamStore& store, const ModelConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const std::size_t w = cfg.width, d = cfg.token_dim();
    scale_embed = ScaleEmbedding(store, "backbone.scale_embed", cfg.scale_vector, w, rng);
    input_proj = nn::Linear(store, "backbone.input_proj", d, w, rng);
    mask_token = store.add("backbone.mask_token", nn::normal_tensor(Shape{d}, kEmbedStd, rng), false);
    class_embed = store.add("backbone.class_embed", nn::normal_tensor(Shape{cfg.n_classes + 1, w}, kEmbedStd, rng), false);
    const std::size_t sides[2] = {cfg.low_side(), cfg.dense_side()};
    for (int s = 0; s < 2; ++s) {
        const std::string tag = "backbone.pos.scale" + std::to_string(s);
        context_pos[s] = store.add(tag + ".context", nn::normal_tensor(Shape{1, w}, kEmbedStd, rng), false);
        grid_row_pos[s] = store.add(tag + ".grid_row", nn::normal_tensor(Shape{sides[s], w}, kEmbedStd, rng), false);
        grid_col_pos[s] = store.add(tag + ".grid_col", nn::normal_tensor(Shape{sides[s], w}, kEmbedStd, rng), false);
    }
    if (cfg.pivot_mode != PivotMode::none) {
        pivot_row_pos = store.add("backbone.pos.pivot_row", nn::normal_tensor(Shape{cfg.low_side(), w}, kEmbedStd, rng), false);
        pivot_col_pos = store.add("backbone.pos.pivot_col", nn::normal_tensor(Shape{cfg.low_side(), w}, kEmbedStd, rng), false);
        const std::size_t pivot_in = cfg.pivot_mode == PivotMode::conditional ? w : d;
        pivot_adapter = nn::Linear(store, "backbone.pivot_adapter", pivot_in, w, rng);
    }
    blocks.reserve(cfg.depth);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        blocks.emplace_back(store, "backbone.block" + std::to_string(i), w, cfg.heads, cfg.ffn_mult, w, rng);
    }
}

std::size_t Backbone::grid_offset(const BackboneInput& in) const { return 1 + (in.pivot.defined() ? in.pivot.dim(1) : 0); }

Tensor Backbone::embed(const BackboneInput& in) const {
    const int s = in.scale_id;
    if (s != 0 && s != 1) throw ConfigError("scale id must be 0 or 1");
    const std::size_t n = s == 0 ? cfg.low_tokens() : cfg.dense_tokens();
    const std::size_t d = cfg.token_dim(), w = cfg.width;
    const std::size_t batch = in.class_ids.size();
    if (in.tokens.rank() != 3 || in.tokens.dim(0) != batch || in.tokens.dim(1) != n || in.tokens.dim(2) != d) {
        throw DimensionError("backbone tokens must be [" + std::to_string(batch) + "," + std::to_string(n) + "," + std::to_string(d) +
                             "], got " + shape_str(in.tokens.shape()));
    }
    if (in.mask.shape() != Shape{batch, n, 1}) throw DimensionError("backbone mask must be [B, N, 1], got " + shape_str(in.mask.shape()));
    if (s == 0 && in.pivot.defined()) throw ConfigError("phase-1 (scale 0) layout cannot carry a pivot segment");
    if (s == 1 && in.pivot.defined() && cfg.pivot_mode == PivotMode::none) throw ConfigError("pivot supplied but pivot_mode is none");
    if (s == 1 && !in.pivot.defined() && cfg.pivot_mode != PivotMode::none) throw ConfigError("phase-2 layout is missing its pivot");
    for (std::size_t id : in.class_ids) {
        if (id > cfg.n_classes) throw ConfigError("class id " + std::to_string(id) + " out of range");
    }

    std::vector<Tensor> segments;
    const Tensor ctx = ops::reshape(ops::take_rows(class_embed, in.class_ids), Shape{batch, 1, w});
    segments.push_back(ops::add(ctx, context_pos[s]));
    if (in.pivot.defined()) {
        const std::size_t pin = cfg.pivot_mode == PivotMode::conditional ? w : d;
        if (in.pivot.shape() != Shape{batch, cfg.low_tokens(), pin}) {
            throw DimensionError("pivot must be " + shape_str({batch, cfg.low_tokens(), pin}) + ", got " + shape_str(in.pivot.shape()));
        }
        segments.push_back(ops::add(pivot_adapter(in.pivot), grid_positions(pivot_row_pos, pivot_col_pos)));
    }
    const Tensor keep = ops::add_scalar(ops::scale(in.mask, -1.0), 1.0);
    const Tensor filled = ops::add(ops::mul(in.tokens, keep), ops::mul(in.mask, mask_token));
    segments.push_back(ops::add(input_proj(filled), grid_positions(grid_row_pos[s], grid_col_pos[s])));
    return ops::concat(segments, 1);
}

Tensor Backbone::run_blocks(const Tensor& sequence, const Tensor& v) const {
    Tensor z = sequence;
    for (const auto& blk : blocks) z = blk(z, v);
    return z;
}

Tensor Backbone::forward(const BackboneInput& in) const {
    const Tensor seq = embed(in);
    const Tensor out = ops::layer_norm(run_blocks(seq, scale_embed(in.scale_id)));
    const std::size_t off = grid_offset(in);
    return ops::slice(out, 1, off, seq.dim(1) - off);
}

std::size_t backbone_param_count(const ModelConfig& c) {
    const std::size_t w = c.width, d = c.token_dim(), m = c.ffn_mult;
    std::size_t n = 0;
    switch (c.scale_vector) {
        case ScaleVector::sinusoidal:
            n += 2 * (w * w + w);
            break;
        case ScaleVector::learned:
            n += 2 * w;
            break;
        case ScaleVector::none:
            break;
    }
    n += d * w + w;                 // input projection
    n += d;                         // mask token
    n += (c.n_classes + 1) * w;     // class table incl. null class
    n += 2 * w;                     // context position per scale
    n += 2 * c.low_side() * w + 2 * c.dense_side() * w;
    if (c.pivot_mode != PivotMode::none) {
        n += 2 * c.low_side() * w;
        n += (c.pivot_mode == PivotMode::conditional ? w : d) * w + w;
    }
    const std::size_t block = 2 * w + (w * 6 * w + 6 * w) + 3 * w * w + w * w + (w * m * w + m * w) + (m * w * w + w);
    n += c.depth * block;
    return n;
}

}  // namespace himar
