// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a dynamic reverse-mode autodiff graph.
//
// Every differentiable op records its inputs and a backward closure on the
// output node. `backward(loss)` walks the graph once in reverse topological
// order, accumulates gradients into leaf tensors, and then releases the graph.
// Gradient recording is controlled per thread (see NoGradGuard), so parallel
// lanes that each build their own graph never share tape state.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace himar {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool released = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
    bool has_grad() const { return grad.size() == data.size() && !data.empty(); }
};

}  // namespace detail

class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    /// Extent of axis `axis`; negative counts from the back.
    std::size_t dim(std::ptrdiff_t axis) const;
    std::size_t size() const;

    std::span<const double> values() const;
    /// Direct write access. Intended for leaves (parameters, inputs).
    std::span<double> mutable_values();
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on = true);

    /// Accumulated gradient; zeros when nothing was accumulated yet.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    /// Copy of the values with no graph attached.
    Tensor detach() const;
    bool all_finite() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node> node);

   private:
    std::shared_ptr<detail::Node> node_;
};

/// True when ops on this thread record gradients.
bool grad_enabled();

/// Disables gradient recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

/// Populates gradients of every leaf that `loss` depends on and frees the
/// graph. Throws GraphError for a non-scalar or detached loss, or when the
/// graph was already consumed by an earlier call.
void backward(const Tensor& loss);

namespace detail {

using BackwardFn = std::function<void(Node&)>;

/// Builds an op result. The backward closure is attached only when recording
/// is on and at least one input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn fn);

}  // namespace detail

}  // namespace himar
