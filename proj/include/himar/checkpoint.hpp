// SPDX-License-Identifier: Apache-2.0
//
// Self-describing binary checkpoints:
//   "HIMR", u32 version, config text, dataset stats,
//   parameter table (name, shape, f64 payload), EMA table,
//   optimizer moments, and the training rng position (seed, step).
// All integers and floats are little-endian.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "himar/config.hpp"
#include "himar/model.hpp"
#include "himar/train.hpp"

namespace himar {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    RunConfig config;
    NormStats stats;
    std::vector<std::string> names;
    std::vector<Shape> shapes;
    std::vector<std::vector<double>> params;
    std::vector<std::vector<double>> ema;
    std::uint64_t adam_t = 0;
    std::vector<std::vector<double>> adam_m;
    std::vector<std::vector<double>> adam_v;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    double wall_s = 0.0;
};

/// Snapshot of a model and, when given, its training state. Without a
/// trainer the EMA table equals the parameters and the moments are zero.
Checkpoint capture_checkpoint(const RunConfig& config, const HiMarModel& model, const NormStats& stats, const Trainer* trainer = nullptr);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

/// Builds the model described by the embedded config and loads the raw or EMA
/// table into it. Every parameter name and shape must match.
std::unique_ptr<HiMarModel> model_from_checkpoint(const Checkpoint& ckpt, bool use_ema);

/// Restores optimizer, EMA, step counter, and wall time into a trainer built
/// on a model loaded from the same checkpoint.
void restore_trainer(Trainer& trainer, const Checkpoint& ckpt);

}  // namespace himar
