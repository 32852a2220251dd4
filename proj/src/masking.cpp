// SPDX-License-Identifier: Apache-2.0
#include "himar/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "himar/errors.hpp"
#include "himar/format.hpp"

namespace himar {

MaskState MaskState::all_masked(std::size_t n, std::size_t dim) {
    MaskState s;
    s.n = n;
    s.dim = dim;
    s.known.assign(n, 0);
    s.values.assign(n * dim, 0.0);
    return s;
}

std::size_t MaskState::known_count() const { return static_cast<std::size_t>(std::count(known.begin(), known.end(), 1)); }

std::vector<std::size_t> MaskState::masked_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i) {
        if (!known[i]) out.push_back(i);
    }
    return out;
}

void MaskState::set(std::size_t pos, const double* token) {
    std::copy_n(token, dim, values.begin() + static_cast<std::ptrdiff_t>(pos * dim));
    known[pos] = 1;
}

RatioSampler RatioSampler::uniform(double lo, double hi) {
    if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) throw ConfigError("uniform ratio bounds must satisfy 0 < lo <= hi <= 1");
    return {Kind::uniform, lo, hi};
}

RatioSampler RatioSampler::cosine() { return {Kind::cosine, 0.0, 0.0}; }

RatioSampler RatioSampler::beta(double a, double b) {
    if (!(a > 0.0 && b > 0.0)) throw ConfigError("beta ratio parameters must be positive");
    return {Kind::beta, a, b};
}

RatioSampler RatioSampler::parse(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ':');) parts.push_back(item);
    try {
        if (parts.size() == 1 && parts[0] == "cosine") return cosine();
        if (parts.size() == 3 && parts[0] == "uniform") return uniform(std::stod(parts[1]), std::stod(parts[2]));
        if (parts.size() == 3 && parts[0] == "beta") return beta(std::stod(parts[1]), std::stod(parts[2]));
    } catch (const std::logic_error&) {
    }
    throw ConfigError("invalid ratio sampler '" + text + "' (expected cosine, uniform:LO:HI, or beta:A:B)");
}

std::string RatioSampler::to_string() const {
    std::ostringstream os;
    switch (kind_) {
        case Kind::cosine:
            return "cosine";
        case Kind::uniform:
            os << "uniform:" << format_double(p0_) << ':' << format_double(p1_);
            break;
        case Kind::beta:
            os << "beta:" << format_double(p0_) << ':' << format_double(p1_);
            break;
    }
    return os.str();
}

double RatioSampler::sample(Rng& rng) const {
    switch (kind_) {
        case Kind::uniform:
            return p0_ + (p1_ - p0_) * rng.uniform();
        case Kind::cosine: {
            const double r = std::cos(0.5 * std::numbers::pi * rng.uniform());
            return std::max(r, 1e-12);
        }
        case Kind::beta:
            return std::max(rng.beta(p0_, p1_), 1e-12);
    }
    return 1.0;
}

std::size_t masked_count_for_ratio(double r, std::size_t n) {
    const auto m = static_cast<std::size_t>(std::ceil(r * static_cast<double>(n)));
    return std::clamp<std::size_t>(m, 1, n);
}

std::vector<std::size_t> inference_schedule(std::size_t n, std::size_t steps) {
    if (n == 0) throw ConfigError("inference schedule needs at least one token");
    if (steps == 0) throw ConfigError("inference schedule needs at least one step");
    if (steps > n) {
        throw ConfigError("cannot predict " + std::to_string(n) + " tokens in " + std::to_string(steps) +
                          " steps with at least one token per step (K > N)");
    }
    std::vector<std::size_t> counts(steps);
    std::size_t prev = n;
    for (std::size_t k = 1; k <= steps; ++k) {
        std::size_t masked = 0;
        if (k < steps) {
            const double c = std::cos(0.5 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(steps));
            masked = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * c));
            masked = std::min(masked, prev - 1);
        }
        counts[k - 1] = prev - masked;
        prev = masked;
    }
    return counts;
}

std::vector<std::size_t> random_subset(std::size_t n, std::size_t count, Rng& rng) {
    if (count > n) throw ConfigError("cannot choose " + std::to_string(count) + " of " + std::to_string(n) + " positions");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<std::size_t> choose_positions(const MaskState& state, std::size_t count, Rng& rng) {
    const auto masked = state.masked_positions();
    if (count > masked.size()) {
        throw ConfigError("requested " + std::to_string(count) + " positions but only " + std::to_string(masked.size()) +
                          " are masked");
    }
    auto pick = random_subset(masked.size(), count, rng);
    for (auto& p : pick) p = masked[p];
    return pick;
}

}  // namespace himar
