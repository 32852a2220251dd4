// SPDX-License-Identifier: Apache-2.0
//
// Plain loop implementations used as independent references in the tests.
// Nothing here calls into the tensor library except to read values out.
#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "himar/nn.hpp"
#include "himar/rng.hpp"
#include "himar/tensor.hpp"

namespace ref {

using Vec = std::vector<double>;
// Row-major matrix of `rows` vectors.
struct Mat {
    std::size_t rows = 0, cols = 0;
    Vec v;
    double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
    Vec row(std::size_t r) const { return Vec(v.begin() + r * cols, v.begin() + (r + 1) * cols); }
};

inline Vec values(const himar::Tensor& t) { return Vec(t.values().begin(), t.values().end()); }

inline himar::Tensor randn(himar::Shape shape, himar::Rng& rng, double scale = 1.0) {
    himar::Tensor t(shape);
    for (double& x : t.mutable_values()) x = scale * rng.normal();
    return t;
}

// Adds scaled noise to every parameter so zero-initialized layers become live.
inline void randomize(const himar::nn::ParamStore& store, himar::Rng& rng, double scale) {
    for (const auto& p : store.params()) {
        himar::Tensor t = p.tensor;
        for (double& x : t.mutable_values()) x += scale * rng.normal();
    }
}

// y = x W + b with W stored [in, out].
inline Vec affine(const Vec& x, const himar::Tensor& w, const himar::Tensor* b) {
    const std::size_t in = w.dim(0), out = w.dim(1);
    Vec y(out, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
        double s = b ? b->values()[o] : 0.0;
        for (std::size_t i = 0; i < in; ++i) s += x[i] * w.values()[i * out + o];
        y[o] = s;
    }
    return y;
}

inline Vec layer_norm(const Vec& x, double eps = 1e-6) {
    double mu = 0;
    for (double e : x) mu += e;
    mu /= static_cast<double>(x.size());
    double var = 0;
    for (double e : x) var += (e - mu) * (e - mu);
    var /= static_cast<double>(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + eps);
    return y;
}

inline double gelu(double x) {
    const double c = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}
inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline Vec map(Vec x, double (*f)(double)) {
    for (double& e : x) e = f(e);
    return x;
}
inline Vec add(Vec a, const Vec& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}
inline Vec slice(const Vec& x, std::size_t start, std::size_t len) { return Vec(x.begin() + start, x.begin() + start + len); }
// x * (1 + scale) + shift
inline Vec modulate(const Vec& x, const Vec& shift, const Vec& scale) {
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * (1.0 + scale[i]) + shift[i];
    return y;
}
inline Vec gated(const Vec& x, const Vec& gate, const Vec& h) {
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + gate[i] * h[i];
    return y;
}

inline Vec sinusoidal(double index, std::size_t dim) {
    Vec out(dim);
    for (std::size_t j = 0; j < dim / 2; ++j) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
        out[2 * j] = std::sin(index * w);
        out[2 * j + 1] = std::cos(index * w);
    }
    return out;
}

// Multi-head attention over the rows of q, k, v (each n x d).
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) {
    const std::size_t n = q.rows, m = k.rows, d = q.cols, hd = d / heads;
    Mat out{n, d, Vec(n * d, 0.0)};
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            Vec s(m);
            double mx = -1e300;
            for (std::size_t j = 0; j < m; ++j) {
                double dot = 0;
                for (std::size_t c = 0; c < hd; ++c) dot += q.at(i, h * hd + c) * k.at(j, h * hd + c);
                s[j] = dot / std::sqrt(static_cast<double>(hd));
                mx = std::max(mx, s[j]);
            }
            double z = 0;
            for (double& e : s) z += (e = std::exp(e - mx));
            for (std::size_t j = 0; j < m; ++j) {
                for (std::size_t c = 0; c < hd; ++c) out.at(i, h * hd + c) += s[j] / z * v.at(j, h * hd + c);
            }
        }
    }
    return out;
}

}  // namespace ref
