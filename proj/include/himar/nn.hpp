// SPDX-License-Identifier: Apache-2.0
//
// Parameter registry and the small set of layers shared by every module.
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "himar/ops.hpp"
#include "himar/rng.hpp"
#include "himar/tensor.hpp"

namespace himar::nn {

struct Parameter {
    std::string name;
    Tensor tensor;
    /// Whether decoupled weight decay applies (linear weight matrices only).
    bool decay = true;
};

/// Ordered, name-unique collection of trainable tensors.
class ParamStore {
   public:
    /// Registers `init` as a trainable parameter and returns the shared handle.
    Tensor add(const std::string& name, Tensor init, bool decay);

    std::span<const Parameter> params() const { return params_; }
    std::size_t size() const { return params_.size(); }
    const Parameter& find(const std::string& name) const;
    std::size_t scalar_count() const;
    void zero_grad();

    std::vector<std::vector<double>> snapshot() const;
    void load(const std::vector<std::vector<double>>& values);

   private:
    std::vector<Parameter> params_;
};

enum class Init { xavier, zero };

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

class Linear {
   public:
    Linear() = default;
    Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng, Init init = Init::xavier,
           bool bias = true);

    Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

    Tensor weight;
    Tensor bias;
};

/// linear -> GELU -> linear, hidden width = mult * width.
class FeedForward {
   public:
    FeedForward() = default;
    FeedForward(ParamStore& store, const std::string& name, std::size_t width, std::size_t mult, Rng& rng);

    Tensor operator()(const Tensor& x) const { return fc2(ops::gelu(fc1(x))); }

    Linear fc1;
    Linear fc2;
};

/// x * (1 + scale) + shift
Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale);
/// x + gate * h
Tensor gated_residual(const Tensor& x, const Tensor& gate, const Tensor& h);

}  // namespace himar::nn
