// SPDX-License-Identifier: Apache-2.0
#include "himar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <new>
#include <sstream>
#include <unordered_set>

#include "himar/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace himar {

namespace {

#if defined(__GLIBC__)
// Activation buffers of a few MB are allocated and freed many times per step.
// Keeping them on the heap instead of fresh mmap regions avoids repeated page
// faults, which otherwise cost more than the arithmetic.
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();
#endif

}  // namespace

}  // namespace himar

// Eigen vectorizes reductions by peeling off elements up to the first
// SIMD-aligned address, so the summation order (and the last bit of the
// result) depends on where a buffer lands in memory. Aligning every
// allocation to 64 bytes makes results a function of the shapes alone.
// The memory stays compatible with free(), so foreign deletes are fine.
namespace {
constexpr std::size_t kAlign = 64;
void* aligned_or_null(std::size_t n) noexcept {
    const std::size_t rounded = (std::max<std::size_t>(n, 1) + kAlign - 1) / kAlign * kAlign;
    return std::aligned_alloc(kAlign, rounded);
}
void* aligned_or_throw(std::size_t n) {
    for (;;) {
        if (void* p = aligned_or_null(n)) return p;
        std::new_handler h = std::get_new_handler();
        if (!h) throw std::bad_alloc();
        h();
    }
}
}  // namespace

void* operator new(std::size_t n) { return aligned_or_throw(n); }
void* operator new[](std::size_t n) { return aligned_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }

namespace himar {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

void check_extents(const Shape& shape) {
    for (std::size_t e : shape) {
        if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) {
    check_extents(shape);
    node_ = std::make_shared<detail::Node>();
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
    check_extents(shape);
    if (values.size() != numel(shape)) {
        throw DimensionError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::ptrdiff_t axis) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
}

std::size_t Tensor::size() const { return node_->data.size(); }

std::span<const double> Tensor::values() const { return node_->data; }

std::span<double> Tensor::mutable_values() { return node_->data; }

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() needs a single-element tensor, got " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

std::span<const double> Tensor::grad() const { return node_->grad_buffer(); }

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

bool Tensor::all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](double v) { return std::isfinite(v); });
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward on an undefined tensor");
    if (loss.size() != 1) throw GraphError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    detail::Node* root = loss.node().get();
    if (root->released) throw GraphError("graph already consumed by a previous backward call");
    if (!root->requires_grad) throw GraphError("loss is detached: it does not depend on any tensor requiring grad");

    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
    }
    for (detail::Node* node : order) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
            node->grad.clear();
            node->grad.shrink_to_fit();
            node->released = true;
        }
    }
    root->released = true;
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (t_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (auto& t : inputs) node->parents.push_back(t.node());
            node->backward_fn = std::move(fn);
        }
    }
    return Tensor::from_node(std::move(node));
}

}  // namespace detail

}  // namespace himar
