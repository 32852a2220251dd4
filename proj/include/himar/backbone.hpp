// SPDX-License-Identifier: Apache-2.0
//
// The shared two-scale transformer that maps (class context, optional pivot,
// masked token grid) to per-position conditional tokens.
#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "himar/config.hpp"
#include "himar/nn.hpp"

namespace himar {

/// Bidirectional attention with bias-free q/k/v and output projections.
class SelfAttention {
   public:
    SelfAttention() = default;
    SelfAttention(nn::ParamStore& store, const std::string& name, std::size_t width, std::size_t heads, Rng& rng);

    Tensor operator()(const Tensor& x) const;

    nn::Linear qkv;
    nn::Linear proj;
    std::size_t width = 0;
    std::size_t heads = 1;
};

/// Transformer block whose norm scale/shift and residual gates are regressed
/// from the scale vector:
///   v' = a * v + b,  (alpha1, beta1, gamma1, alpha2, beta2, gamma2) = split(W v' + c)
///   z_a = z + gamma1 * Attn((1 + alpha1) * LN(z) + beta1)
///   z'  = z_a + gamma2 * FFN((1 + alpha2) * LN(z_a) + beta2)
/// W and c start at zero, so the block is the identity at initialization.
class ScaleAwareBlock {
   public:
    ScaleAwareBlock() = default;
    ScaleAwareBlock(nn::ParamStore& store, const std::string& name, std::size_t width, std::size_t heads, std::size_t ffn_mult,
                    std::size_t scale_dim, Rng& rng);

    /// z: [B, L, width]; v: [scale_dim].
    Tensor operator()(const Tensor& z, const Tensor& v) const;
    /// The 6 * width modulation vector for scale vector v.
    Tensor modulation(const Tensor& v) const;

    Tensor a;
    Tensor b;
    nn::Linear mod;
    SelfAttention attn;
    nn::FeedForward ffn;
    std::size_t width = 0;
};

/// scale id -> scale vector v, shared by all blocks of one forward pass.
class ScaleEmbedding {
   public:
    ScaleEmbedding() = default;
    ScaleEmbedding(nn::ParamStore& store, const std::string& name, ScaleVector kind, std::size_t dim, Rng& rng);

    Tensor operator()(int scale_id) const;

    ScaleVector kind = ScaleVector::sinusoidal;
    std::size_t dim = 0;
    nn::Linear fc1;
    nn::Linear fc2;
    Tensor table;
};

/// One backbone call. Phase 1 uses scale 0 and no pivot; phase 2 uses scale 1
/// and, unless pivots are disabled, a pivot segment.
struct BackboneInput {
    /// Class id per sample; the null class id is n_classes.
    std::span<const std::size_t> class_ids;
    /// [B, N, token_dim]; values at masked positions are ignored.
    Tensor tokens;
    /// [B, N, 1]; 1 marks a masked position.
    Tensor mask;
    int scale_id = 0;
    /// [B, N_low, width] conditional tokens or [B, N_low, token_dim] visual tokens.
    Tensor pivot;
};

class Backbone {
   public:
    Backbone() = default;
    Backbone(nn::ParamStore& store, const ModelConfig& cfg, Rng& rng);

    /// Conditional tokens of the grid segment: [B, N, width].
    Tensor forward(const BackboneInput& in) const;

    /// Concatenated, projected input sequence [B, L, width] (context, pivot, grid).
    Tensor embed(const BackboneInput& in) const;
    /// The block stack without the final norm.
    Tensor run_blocks(const Tensor& sequence, const Tensor& v) const;
    Tensor scale_vector(int scale_id) const { return scale_embed(scale_id); }

    std::size_t grid_offset(const BackboneInput& in) const;

    ModelConfig cfg;
    ScaleEmbedding scale_embed;
    nn::Linear input_proj;
    Tensor mask_token;
    Tensor class_embed;
    Tensor context_pos[2];
    Tensor grid_row_pos[2];
    Tensor grid_col_pos[2];
    Tensor pivot_row_pos;
    Tensor pivot_col_pos;
    nn::Linear pivot_adapter;
    std::vector<ScaleAwareBlock> blocks;
};

/// Closed-form backbone parameter count for a configuration.
std::size_t backbone_param_count(const ModelConfig& cfg);

}  // namespace himar
