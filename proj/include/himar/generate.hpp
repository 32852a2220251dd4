// SPDX-License-Identifier: Apache-2.0
//
// Two-phase hierarchical generation: low-resolution tokens first with the MLP
// head, then dense tokens with the transformer head, conditioned on the
// final phase-1 conditional tokens.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "himar/config.hpp"
#include "himar/model.hpp"
#include "himar/tokenizer.hpp"

namespace himar {

struct GenerateTrace {
    /// Tokens committed per step in each phase.
    std::vector<std::size_t> counts1;
    std::vector<std::size_t> counts2;
    /// Masked positions left after the last step of each phase, per image.
    std::vector<std::size_t> final_masked1;
    std::vector<std::size_t> final_masked2;
    /// Whether the unconditional branch ran in each phase.
    bool guided1 = false;
    bool guided2 = false;
};

struct GenerateOutput {
    std::vector<Image> images;
    /// Token grids of both scales, per image (low is empty without phase 1).
    std::vector<TokenGrid> low;
    std::vector<TokenGrid> dense;
    GenerateTrace trace;
};

/// Generates one image per class id. Image i draws all of its randomness from
/// streams forked by (seed, first_index + i), so its mask order and noise do
/// not depend on how a request is split into calls.
GenerateOutput generate(const HiMarModel& model, std::span<const std::size_t> class_ids, const GenerateConfig& gcfg,
                        const NormStats& stats, std::uint64_t seed, std::uint64_t first_index = 0);

/// Generates `count` images cycling through the classes, in chunks of
/// gcfg.batch_size spread over the worker pool.
std::vector<Image> generate_many(const HiMarModel& model, std::size_t count, const GenerateConfig& gcfg, const NormStats& stats,
                                 std::uint64_t seed, std::vector<std::size_t>* labels = nullptr);

}  // namespace himar
