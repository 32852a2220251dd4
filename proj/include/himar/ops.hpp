// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. All ops are float64 and deterministic: every
// reduction runs in a fixed order independent of thread count.
#pragma once

#include <cstddef>
#include <span>

#include "himar/tensor.hpp"

namespace himar::ops {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis);
/// Views `x` as [rows, x.dim(-1)] and gathers the listed rows (repeats allowed).
Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Batched matrix product [.., m, k] x [.., k, n] with broadcast batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[.., in] * weight[in, out] + bias[out]; `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Normalizes the last axis to zero mean / unit variance. No learned affine.
Tensor layer_norm(const Tensor& x, double eps = 1e-6);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softmax(const Tensor& x);

/// Bidirectional multi-head attention. q: [.., n, d], k/v: [.., m, d]; the
/// model dimension d is split into `heads` contiguous chunks and each head
/// computes softmax(q k^T / sqrt(d / heads)) v.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

/// Interleaved [sin(i w_0), cos(i w_0), sin(i w_1), ...] with
/// w_j = 10000^(-2j/dim). Constant (no gradient).
Tensor sinusoidal_embedding(double index, std::size_t dim);
/// One embedding row per index: [indices.size(), dim].
Tensor sinusoidal_embedding(std::span<const double> indices, std::size_t dim);

}  // namespace himar::ops
