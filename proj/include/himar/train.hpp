// SPDX-License-Identifier: Apache-2.0
//
// Optimizer, parameter averaging, and the training loop.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "himar/dataset.hpp"
#include "himar/model.hpp"

namespace himar {

/// Adam moments with decoupled weight decay. Decay applies only to
/// parameters flagged for it (linear weight matrices).
class AdamW {
   public:
    AdamW() = default;
    explicit AdamW(const nn::ParamStore& store);

    void step(const nn::ParamStore& store, const TrainConfig& cfg, double lr);

    std::uint64_t t = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// Constant learning rate after a linear warmup over the first
/// warmup_fraction * total_steps steps. `step` is 0-based.
double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

/// Optimizer steps implied by the config: max_steps, or epochs over the data.
std::size_t planned_steps(const TrainConfig& cfg, std::size_t dataset_size);

/// shadow <- m * shadow + (1 - m) * param
class Ema {
   public:
    Ema() = default;
    Ema(const nn::ParamStore& store, double momentum);

    void update(const nn::ParamStore& store);

    double momentum = 0.9999;
    std::vector<std::vector<double>> shadow;
};

struct StepRecord {
    std::size_t step = 0;
    double l1 = 0.0;
    double l2 = 0.0;
    double lr = 0.0;
    /// Cumulative training wall time in seconds, including earlier runs.
    double wall_s = 0.0;
};

class Trainer {
   public:
    Trainer(HiMarModel& model, const TrainConfig& cfg, const Dataset& data, const NormStats& stats);

    /// Dataset indices of the batch used at optimizer step `step`: a fresh
    /// seeded permutation per epoch, consumed in order.
    std::vector<std::size_t> batch_indices(std::size_t step) const;

    /// Runs the next optimizer step.
    StepRecord step();

    /// Steps until the planned total, the time budget, or `should_stop`.
    /// `on_step` sees every record.
    void run(const std::function<void(const StepRecord&)>& on_step = {}, const std::function<bool()>& should_stop = {});

    bool finished() const;

    HiMarModel& model;
    TrainConfig cfg;
    const Dataset& data;
    NormStats stats;
    AdamW opt;
    Ema ema;
    std::size_t steps_done = 0;
    std::size_t total_steps = 0;
    double wall_s = 0.0;
};

}  // namespace himar
