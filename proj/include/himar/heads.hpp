// SPDX-License-Identifier: Apache-2.0
//
// Per-token probability modeling: the forward noise schedule, the two
// diffusion heads, the epsilon-prediction loss, and guided reverse sampling.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "himar/config.hpp"
#include "himar/nn.hpp"
#include "himar/tokenizer.hpp"

namespace himar {

/// Discrete forward process. Timesteps are 1-based: t = 1..T.
class NoiseSchedule {
   public:
    NoiseSchedule() = default;
    NoiseSchedule(NoiseKind kind, std::size_t steps);

    std::size_t steps() const { return betas_.size(); }
    double beta(std::size_t t) const { return betas_.at(t - 1); }
    double alpha(std::size_t t) const { return 1.0 - beta(t); }
    double alpha_bar(std::size_t t) const { return t == 0 ? 1.0 : alpha_bars_.at(t - 1); }

    /// `count` timesteps evenly spread over 1..T, ascending, always including T.
    std::vector<std::size_t> respaced(std::size_t count) const;

   private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

/// x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps, elementwise.
std::vector<double> add_noise(const NoiseSchedule& schedule, std::span<const double> x, std::size_t t, std::span<const double> eps);

/// sinusoidal(t) -> linear -> SiLU -> linear.
class TimestepEmbedder {
   public:
    TimestepEmbedder() = default;
    TimestepEmbedder(nn::ParamStore& store, const std::string& name, std::size_t width, Rng& rng);
    /// [t.size(), width]
    Tensor operator()(std::span<const double> t) const;

    nn::Linear fc1;
    nn::Linear fc2;
    std::size_t width = 0;
};

/// Phase-1 head: residual blocks of (adaLN from context, layer norm, FFN),
/// applied to every token independently.
class MlpHead {
   public:
    MlpHead() = default;
    MlpHead(nn::ParamStore& store, const std::string& name, std::size_t token_dim, std::size_t cond_dim, std::size_t width,
            std::size_t depth, std::size_t ffn_mult, Rng& rng);

    /// x_t: [M, token_dim], t: M timesteps, z: [M, cond_dim] -> eps_hat [M, token_dim].
    Tensor predict(const Tensor& x_t, std::span<const double> t, const Tensor& z) const;

    struct Block {
        nn::Linear ada;
        nn::FeedForward ffn;
    };
    TimestepEmbedder time_embed;
    nn::Linear cond_embed;
    nn::Linear input_proj;
    std::vector<Block> blocks;
    nn::Linear final_ada;
    nn::Linear output_proj;
    std::size_t width = 0;
};

/// Phase-2 head: transformer blocks over the whole grid. Each position i gets
/// its own context c_i = time embedding + projected z_i, lifted by a 2-layer
/// MLP to the six modulation vectors of the block.
class DitHead {
   public:
    DitHead() = default;
    DitHead(nn::ParamStore& store, const std::string& name, std::size_t token_dim, std::size_t cond_dim, std::size_t width,
            std::size_t depth, std::size_t heads, std::size_t ffn_mult, Rng& rng);

    /// y: [B, N, token_dim], t: B timesteps, z: [B, N, cond_dim] -> eps_hat [B, N, token_dim].
    Tensor predict(const Tensor& y, std::span<const double> t, const Tensor& z) const;

    struct Block {
        nn::Linear ada1;
        nn::Linear ada2;
        nn::Linear qkv;
        nn::Linear proj;
        nn::FeedForward ffn;
    };
    TimestepEmbedder time_embed;
    nn::Linear cond_embed;
    nn::Linear input_proj;
    std::vector<Block> blocks;
    nn::Linear output_proj;
    std::size_t width = 0;
    std::size_t heads = 1;
};

/// Phase-2 prediction with clean values at unmasked positions.
/// `known` holds B * N flags (1 = known); `known_values` must be defined
/// whenever any position is known.
Tensor dit_head_predict(const DitHead& head, const Tensor& latents, std::span<const double> t, const Tensor& z,
                        std::span<const std::uint8_t> known, const Tensor& known_values);

/// Number of loss evaluations that had no supervised position (reported as 0).
std::uint64_t empty_loss_warnings();

/// Mean over draws, supervised tokens, and token entries of ||eps - eps_hat||^2
/// with t ~ U{1..T}. z: [M, cond], x: [M, d]; each row is one supervised token.
Tensor mlp_diffusion_loss(const MlpHead& head, const NoiseSchedule& schedule, const Tensor& z, const Tensor& x, std::size_t draws,
                          Rng& rng);

/// Same objective for the transformer head. One t per sample and draw;
/// `mask` has B * N flags (1 = masked and supervised). Unmasked positions carry
/// their clean values.
Tensor dit_diffusion_loss(const DitHead& head, const NoiseSchedule& schedule, const Tensor& z, const Tensor& x,
                          std::span<const std::uint8_t> mask, std::size_t draws, Rng& rng);

/// Guided noise estimate; exactly `cond` when scale == 1.
std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double scale);

struct SamplerOptions {
    std::size_t steps = 100;
    SamplerVariance variance = SamplerVariance::beta;
    /// Per-entry clip range of the denoised estimate; empty disables clipping.
    TokenBounds bounds;
};

/// Guidance inputs: the unconditional branch runs only when `uncond` is
/// defined and scale != 1.
struct Guidance {
    Tensor uncond;
    double scale = 1.0;
    bool active() const { return uncond.defined() && scale != 1.0; }
};

/// Ancestral sampling of M tokens with the MLP head. `row_rngs[i]` supplies
/// the noise of row i. Returns [M, token_dim] values.
std::vector<double> sample_mlp_head(const MlpHead& head, const NoiseSchedule& schedule, const Tensor& z_cond, const Guidance& guidance,
                                    const SamplerOptions& opts, std::span<Rng* const> row_rngs);

/// Joint ancestral sampling of every unknown position of B grids with the
/// transformer head; known positions stay at their clean values throughout.
/// `rngs[b]` supplies the noise of grid b. Returns [B, N, token_dim] values.
std::vector<double> sample_dit_head(const DitHead& head, const NoiseSchedule& schedule, const Tensor& z_cond, const Guidance& guidance,
                                    std::span<const std::uint8_t> known, std::span<const double> known_values,
                                    const SamplerOptions& opts, std::span<Rng* const> rngs);

}  // namespace himar
