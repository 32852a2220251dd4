// SPDX-License-Identifier: Apache-2.0
//
// Model, training, generation, and evaluation settings, the named presets,
// and the plain-text key=value run-config format.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "himar/masking.hpp"

namespace himar {

enum class PivotMode { conditional, visual, none };
enum class ScaleVector { sinusoidal, learned, none };
enum class NoiseKind { cosine, linear };
enum class SamplerVariance { beta, posterior };

std::string to_string(PivotMode m);
std::string to_string(ScaleVector s);
std::string to_string(NoiseKind k);
std::string to_string(SamplerVariance v);
PivotMode parse_pivot_mode(const std::string& s);

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t channels = 1;
    std::size_t n_classes = 10;
    std::size_t patch_size = 4;

    std::size_t depth = 6;
    std::size_t width = 128;
    std::size_t heads = 4;
    std::size_t ffn_mult = 4;

    std::size_t head1_depth = 3;
    std::size_t head1_width = 128;
    std::size_t head2_depth = 3;
    std::size_t head2_width = 128;
    std::size_t head2_heads = 4;
    std::size_t head_ffn_mult = 4;

    ScaleVector scale_vector = ScaleVector::sinusoidal;
    PivotMode pivot_mode = PivotMode::conditional;
    bool detach_pivot = false;

    NoiseKind noise = NoiseKind::cosine;
    std::size_t train_timesteps = 1000;

    std::size_t dense_side() const { return image_size / patch_size; }
    std::size_t low_side() const { return image_size / (2 * patch_size); }
    std::size_t dense_tokens() const { return dense_side() * dense_side(); }
    std::size_t low_tokens() const { return low_side() * low_side(); }
    std::size_t token_dim() const { return patch_size * patch_size * channels; }

    void validate() const;
};

struct TrainConfig {
    double lr = 1e-4;
    double warmup_fraction = 0.125;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.02;
    std::size_t epochs = 800;
    std::size_t batch_size = 16;
    /// Hard cap on optimizer steps; 0 derives the total from epochs.
    std::size_t max_steps = 0;
    /// Wall-clock cap in seconds; 0 disables it.
    double time_budget_s = 0.0;
    double ema_momentum = 0.9999;
    double class_drop = 0.1;
    double loss_weight1 = 1.0;
    double loss_weight2 = 1.0;
    /// Noise draws per supervised token (phase-1 head) / per sample (phase-2 head).
    std::size_t head1_batch_mul = 4;
    std::size_t head2_batch_mul = 1;
    RatioSampler ratio1 = RatioSampler::uniform(0.7, 1.0);
    RatioSampler ratio2 = RatioSampler::cosine();
    std::size_t checkpoint_every = 500;
    std::size_t log_every = 10;
    std::uint64_t seed = 0;

    void validate() const;
};

struct GenerateConfig {
    std::size_t steps1 = 32;
    std::size_t steps2 = 4;
    double cfg_scale1 = 1.5;
    double cfg_scale2 = 1.5;
    bool cfg_phase1 = true;
    bool cfg_phase2 = true;
    /// Reverse-diffusion steps of the phase-1 / phase-2 heads.
    std::size_t sample_steps1 = 100;
    std::size_t sample_steps2 = 20;
    bool clip_denoised = true;
    SamplerVariance variance = SamplerVariance::beta;
    bool use_ema = true;
    std::size_t batch_size = 32;

    void validate() const;
};

struct EvalConfig {
    std::size_t n_samples = 2048;
    std::size_t timing_images = 64;
    std::size_t warmup_images = 8;
    std::uint64_t extractor_seed = 1234;
    std::uint64_t seed = 0;

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    GenerateConfig generate;
    EvalConfig eval;

    /// "tiny" (desk scale) or "b" / "l" / "h".
    static RunConfig preset(const std::string& name);
    /// Applies key=value text over `base`. Unknown or duplicate keys are errors.
    static RunConfig parse(const std::string& text, const RunConfig& base);
    static RunConfig load(const std::string& path, const RunConfig& base);

    /// Canonical text form: every key, fixed order, shortest round-trip numbers.
    std::string serialize() const;
    void validate() const;

    /// Sets one "section.key" to a textual value.
    void set(const std::string& dotted_key, const std::string& value);
};

/// Documentation of every accepted key ("section.key  description").
std::vector<std::string> config_key_docs();

}  // namespace himar
