// SPDX-License-Identifier: Apache-2.0
//
// Analytic-vs-finite-difference gradient checks over every primitive, the
// transformer blocks, both heads, and the full joint training loss.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "himar/rng.hpp"
#include "himar/tensor.hpp"

namespace himar {

struct GradcheckResult {
    std::size_t coords = 0;
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the checked coordinates.
    double rel_error = 0.0;
};

/// Compares backward() against central differences of `loss_fn` for the given
/// leaves. When the leaves hold more than `max_coords` scalars, a random
/// subset of coordinates (spread over all leaves) is checked.
GradcheckResult check_gradients(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& leaves, std::size_t max_coords, Rng& rng,
                                double step = 1e-5);

struct GradcheckRow {
    std::string name;
    std::size_t coords = 0;
    double rel_error = 0.0;
    bool pass = false;
};

/// The full suite. `tiny_loss` includes the Tiny-preset joint loss.
std::vector<GradcheckRow> run_gradcheck(double tolerance = 1e-4, std::uint64_t seed = 7, bool tiny_loss = true);

}  // namespace himar
