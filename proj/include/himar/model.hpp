// SPDX-License-Identifier: Apache-2.0
//
// The full two-phase model and its joint training objective.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "himar/backbone.hpp"
#include "himar/config.hpp"
#include "himar/heads.hpp"
#include "himar/tokenizer.hpp"

namespace himar {

class HiMarModel {
   public:
    HiMarModel(const ModelConfig& cfg, std::uint64_t init_seed);
    HiMarModel(const HiMarModel&) = delete;
    HiMarModel& operator=(const HiMarModel&) = delete;

    std::size_t null_class() const { return cfg.n_classes; }
    /// False when pivots are disabled: the model is then a single-scale MAR.
    bool has_phase1() const { return cfg.pivot_mode != PivotMode::none; }

    ModelConfig cfg;
    nn::ParamStore store;
    Backbone backbone;
    MlpHead head1;
    DitHead head2;
    NoiseSchedule schedule;
};

/// Tokenized training batch at both scales.
struct TokenBatch {
    std::vector<std::size_t> labels;
    /// [B, N_low, d]
    Tensor low;
    /// [B, N_dense, d]
    Tensor dense;
    std::size_t size() const { return labels.size(); }
};

TokenBatch make_token_batch(const ModelConfig& cfg, std::span<const Image> images, std::span<const std::size_t> labels,
                            const NormStats& stats);

/// Test hooks: pin the masking ratios or disable class dropout.
struct LossOverrides {
    std::optional<double> ratio1;
    std::optional<double> ratio2;
    std::optional<double> class_drop;
};

struct JointLoss {
    Tensor total;
    /// Undefined when the model has no phase 1.
    Tensor l1;
    Tensor l2;
    double l1_value() const { return l1.defined() ? l1.item() : 0.0; }
    double l2_value() const { return l2.item(); }
};

/// L = w1 L1 + w2 L2 for one batch. All randomness (class drop, masks,
/// timesteps, noise) is derived from (seed, step), so a step can be replayed
/// exactly. Throws NumericError naming the sub-loss if either is not finite.
JointLoss joint_loss(const HiMarModel& model, const TokenBatch& batch, const TrainConfig& tcfg, std::uint64_t seed, std::uint64_t step,
                     const LossOverrides& overrides = {});

}  // namespace himar
