// SPDX-License-Identifier: Apache-2.0
#include "himar/nn.hpp"

#include <cmath>

#include "himar/errors.hpp"

namespace himar::nn {

Tensor ParamStore::add(const std::string& name, Tensor init, bool decay) {
    for (const auto& p : params_) {
        if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    }
    init.set_requires_grad(true);
    params_.push_back({name, init, decay});
    return init;
}

const Parameter& ParamStore::find(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p;
    }
    throw ConfigError("unknown parameter: " + name);
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

std::vector<std::vector<double>> ParamStore::snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    return out;
}

void ParamStore::load(const std::vector<std::vector<double>>& values) {
    if (values.size() != params_.size()) throw DimensionError("parameter table size mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor t = params_[i].tensor;
        if (values[i].size() != t.size()) throw DimensionError("parameter " + params_[i].name + " size mismatch");
        std::copy(values[i].begin(), values[i].end(), t.mutable_values().begin());
    }
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(Shape{fan_in, fan_out});
    for (double& v : t.mutable_values()) v = rng.uniform(-bound, bound);
    return t;
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.mutable_values()) v = stddev * rng.normal();
    return t;
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng, Init init, bool with_bias) {
    weight = store.add(name + ".weight", init == Init::zero ? Tensor(Shape{in, out}) : xavier_uniform(in, out, rng), true);
    if (with_bias) bias = store.add(name + ".bias", Tensor(Shape{out}), false);
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, std::size_t width, std::size_t mult, Rng& rng) {
    if (mult == 0) throw ConfigError("ffn hidden multiplier must be >= 1");
    fc1 = Linear(store, name + ".fc1", width, mult * width, rng);
    fc2 = Linear(store, name + ".fc2", mult * width, width, rng);
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
    return ops::add(ops::mul(x, ops::add_scalar(scale, 1.0)), shift);
}

Tensor gated_residual(const Tensor& x, const Tensor& gate, const Tensor& h) { return ops::add(x, ops::mul(gate, h)); }

}  // namespace himar::nn
