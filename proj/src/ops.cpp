// SPDX-License-Identifier: Apache-2.0
#include "himar/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "himar/errors.hpp"

namespace himar::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank) {
    const auto r = static_cast<std::ptrdiff_t>(rank);
    const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(a);
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

// Broadcast plan: output shape plus per-operand strides (0 on broadcast axes).
struct Broadcast {
    Shape out;
    std::vector<std::size_t> sa, sb;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Broadcast p;
    p.out.assign(r, 1);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
            throw DimensionError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        p.out[i] = std::max(pa[i], pb[i]);
    }
    const auto ca = contiguous_strides(pa);
    const auto cb = contiguous_strides(pb);
    for (std::size_t i = 0; i < r; ++i) {
        p.sa[i] = pa[i] == 1 ? 0 : ca[i];
        p.sb[i] = pb[i] == 1 ? 0 : cb[i];
    }
    return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
    const std::size_t r = p.out.size();
    if (r == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t inner = p.out[r - 1];
    const std::size_t ia = p.sa[r - 1], ib = p.sb[r - 1];
    const std::size_t outer = numel(p.out) / inner;
    std::vector<std::size_t> idx(r - 1, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t base = o * inner;
        for (std::size_t j = 0; j < inner; ++j) f(base + j, oa + j * ia, ob + j * ib);
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            oa += p.sa[d];
            ob += p.sb[d];
            if (idx[d] < p.out[d]) break;
            oa -= p.sa[d] * p.out[d];
            ob -= p.sb[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
    const auto& av = a.values();
    const auto& bv = b.values();
    if (a.shape() == b.shape()) {
        std::vector<double> out(av.size());
        switch (kind) {
            case BinaryKind::Add:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
                break;
            case BinaryKind::Sub:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
                break;
            case BinaryKind::Mul:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
                break;
        }
        return detail::make_result(a.shape(), std::move(out), {a, b}, [kind](Node& self) {
            const auto& g = self.grad;
            Node& na = *self.parents[0];
            Node& nb = *self.parents[1];
            if (na.requires_grad) {
                auto& ga = na.grad_buffer();
                if (kind == BinaryKind::Mul) {
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nb.data[i];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
            }
            if (nb.requires_grad) {
                auto& gb = nb.grad_buffer();
                switch (kind) {
                    case BinaryKind::Add:
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                        break;
                    case BinaryKind::Sub:
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                        break;
                    case BinaryKind::Mul:
                        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * na.data[i];
                        break;
                }
            }
        });
    }

    Broadcast plan = plan_broadcast(a.shape(), b.shape());
    std::vector<double> out(numel(plan.out));
    switch (kind) {
        case BinaryKind::Add:
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
            break;
        case BinaryKind::Sub:
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
            break;
        case BinaryKind::Mul:
            for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
            break;
    }
    Shape out_shape = plan.out;
    return detail::make_result(std::move(out_shape), std::move(out), {a, b}, [kind, plan](Node& self) {
        const auto& g = self.grad;
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        if (na.requires_grad) {
            auto& ga = na.grad_buffer();
            if (kind == BinaryKind::Mul) {
                for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * nb.data[j]; });
            } else {
                for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += g[o]; });
            }
        }
        if (nb.requires_grad) {
            auto& gb = nb.grad_buffer();
            switch (kind) {
                case BinaryKind::Add:
                    for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] += g[o]; });
                    break;
                case BinaryKind::Sub:
                    for_each_broadcast(plan, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= g[o]; });
                    break;
                case BinaryKind::Mul:
                    for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * na.data[i]; });
                    break;
            }
        }
    });
}

// Unary elementwise op with derivative computed from (x, y).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    return detail::make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
        Node& nx = *self.parents[0];
        auto& gx = nx.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(nx.data[i], self.data[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul); }

Tensor add_scalar(const Tensor& a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
    return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return detail::make_result(Shape{}, {s}, {x}, [](Node& self) {
        auto& gx = self.parents[0]->grad_buffer();
        const double g = self.grad[0];
        for (double& v : gx) v += g;
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mse operands differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto av = a.values();
    const auto bv = b.values();
    const double inv_n = 1.0 / static_cast<double>(av.size());
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - bv[i];
        s += d * d;
    }
    return detail::make_result(Shape{}, {s * inv_n}, {a, b}, [inv_n](Node& self) {
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        const double g = self.grad[0] * 2.0 * inv_n;
        if (na.requires_grad) {
            auto& ga = na.grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * (na.data[i] - nb.data[i]);
        }
        if (nb.requires_grad) {
            auto& gb = nb.grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g * (na.data[i] - nb.data[i]);
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    return detail::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
        auto& gx = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    });
}

Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t start, std::size_t length) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    const Shape& in = x.shape();
    if (length == 0 || start + length > in[ax]) {
        throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") out of range for axis of extent " + std::to_string(in[ax]));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= in[i];
    for (std::size_t i = ax + 1; i < in.size(); ++i) inner *= in[i];
    Shape out_shape = in;
    out_shape[ax] = length;
    const std::size_t src_stride = in[ax] * inner, dst_stride = length * inner, off = start * inner;
    const auto xv = x.values();
    std::vector<double> out(outer * dst_stride);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * src_stride + off), dst_stride,
                    out.begin() + static_cast<std::ptrdiff_t>(o * dst_stride));
    }
    return detail::make_result(std::move(out_shape), std::move(out), {x}, [=](Node& self) {
        auto& gx = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < dst_stride; ++j) gx[o * src_stride + off + j] += self.grad[o * dst_stride + j];
        }
    });
}

Tensor concat(std::span<const Tensor> parts, std::ptrdiff_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& first = parts[0].shape();
    const std::size_t ax = normalize_axis(axis, first.size());
    std::size_t outer = 1, inner = 1, total = 0;
    for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
    for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];
    std::vector<std::size_t> extents;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
        if (!ok) throw DimensionError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(s));
        extents.push_back(s[ax]);
        total += s[ax];
    }
    Shape out_shape = first;
    out_shape[ax] = total;
    std::vector<double> out(outer * total * inner);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].values();
        const std::size_t chunk = extents[k] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                        out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset));
        }
        offset += chunk;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return detail::make_result(std::move(out_shape), std::move(out), std::move(inputs), [=](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            const std::size_t chunk = extents[k] * inner;
            Node& p = *self.parents[k];
            if (p.requires_grad) {
                auto& gp = p.grad_buffer();
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t j = 0; j < chunk; ++j) gp[o * chunk + j] += self.grad[o * total * inner + off + j];
                }
            }
            off += chunk;
        }
    });
}

Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
    const std::size_t cols = x.dim(-1);
    const std::size_t n_rows = x.size() / cols;
    if (rows.empty()) throw DimensionError("take_rows with an empty index list");
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    const auto xv = x.values();
    std::vector<double> out(idx.size() * cols);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n_rows) {
            throw DimensionError("row index " + std::to_string(idx[r]) + " out of range (" + std::to_string(n_rows) + " rows)");
        }
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(r * cols));
    }
    Shape shape{idx.size(), cols};
    return detail::make_result(std::move(shape), std::move(out), {x}, [idx = std::move(idx), cols](Node& self) {
        auto& gx = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t c = 0; c < cols; ++c) gx[idx[r] * cols + c] += self.grad[r * cols + c];
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
    if (k != kb) {
        throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    Broadcast plan;
    try {
        plan = plan_broadcast(a_batch, b_batch);
    } catch (const DimensionError&) {
        throw DimensionError("matmul batch extents not broadcastable: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Shape out_shape = plan.out;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(numel(out_shape));
    const double* ad = a.values().data();
    const double* bd = b.values().data();
    const std::size_t sa = m * k, sb = k * n, sc = m * n;
    // Batch strides from the plan are in units of batch elements.
    for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        MatMap(out.data() + o * sc, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
            ConstMatMap(ad + i * sa, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
            ConstMatMap(bd + j * sb, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    });
    return detail::make_result(std::move(out_shape), std::move(out), {a, b}, [=](Node& self) {
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
        double* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
        double* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
        for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
            ConstMatMap g(self.grad.data() + o * sc, M, N);
            if (ga) MatMap(ga + i * sa, M, K).noalias() += g * ConstMatMap(nb.data.data() + j * sb, K, N).transpose();
            if (gb) MatMap(gb + j * sb, K, N).noalias() += ConstMatMap(na.data.data() + i * sa, M, K).transpose() * g;
        });
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw DimensionError("linear weight must be [in, out], got " + shape_str(weight.shape()));
    const std::size_t in = weight.dim(0), outd = weight.dim(1);
    if (x.dim(-1) != in) {
        throw DimensionError("linear input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd)) {
        throw DimensionError("linear bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
    }
    const std::size_t rows = x.size() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outd;
    std::vector<double> out(rows * outd);
    const auto R = static_cast<Eigen::Index>(rows), I = static_cast<Eigen::Index>(in), O = static_cast<Eigen::Index>(outd);
    MatMap y(out.data(), R, O);
    y.noalias() = ConstMatMap(x.values().data(), R, I) * ConstMatMap(weight.values().data(), I, O);
    if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), O);
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return detail::make_result(std::move(out_shape), std::move(out), std::move(inputs), [R, I, O](Node& self) {
        ConstMatMap g(self.grad.data(), R, O);
        Node& nx = *self.parents[0];
        Node& nw = *self.parents[1];
        if (nx.requires_grad) MatMap(nx.grad_buffer().data(), R, I).noalias() += g * ConstMatMap(nw.data.data(), I, O).transpose();
        if (nw.requires_grad) MatMap(nw.grad_buffer().data(), I, O).noalias() += ConstMatMap(nx.data.data(), R, I).transpose() * g;
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Eigen::Map<Eigen::RowVectorXd>(self.parents[2]->grad_buffer().data(), O) += g.colwise().sum();
        }
    });
}

Tensor layer_norm(const Tensor& x, double eps) {
    const std::size_t d = x.dim(-1);
    const std::size_t rows = x.size() / d;
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mu) * is;
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [d, rows, inv_std = std::move(inv_std)](Node& self) {
        auto& gx = self.parents[0]->grad_buffer();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * d;
            const double* y = self.data.data() + r * d;
            double gm = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                gm += g[j];
                gy += g[j] * y[j];
            }
            gm *= inv_d;
            gy *= inv_d;
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_std[r] * (g[j] - gm - y[j] * gy);
        }
    });
}

namespace {

using ArrayMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrayMap = Eigen::Map<const Eigen::ArrayXd>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

// tanh through the vectorized exp: 1 - 2 / (1 + e^{2u}).
Eigen::ArrayXd gelu_tanh(const ConstArrayMap& v) {
    const Eigen::ArrayXd u = kGeluC * (v + kGeluK * v.cube());
    return 1.0 - 2.0 / (1.0 + (2.0 * u).exp());
}

}  // namespace

Tensor gelu(const Tensor& x) {
    const auto xv = x.values();
    const ConstArrayMap v(xv.data(), static_cast<Eigen::Index>(xv.size()));
    std::vector<double> out(xv.size());
    ArrayMap(out.data(), static_cast<Eigen::Index>(out.size())) = 0.5 * v * (1.0 + gelu_tanh(v));
    return detail::make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        Node& nx = *self.parents[0];
        auto& gx = nx.grad_buffer();
        const auto n = static_cast<Eigen::Index>(nx.data.size());
        const ConstArrayMap v(nx.data.data(), n);
        const Eigen::ArrayXd t = gelu_tanh(v);
        const Eigen::ArrayXd d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluK * v.square());
        ArrayMap(gx.data(), n) += ConstArrayMap(self.grad.data(), n) * d;
    });
}

Tensor silu(const Tensor& x) {
    const auto xv = x.values();
    const ConstArrayMap v(xv.data(), static_cast<Eigen::Index>(xv.size()));
    std::vector<double> out(xv.size());
    ArrayMap(out.data(), static_cast<Eigen::Index>(out.size())) = v / (1.0 + (-v).exp());
    return detail::make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        Node& nx = *self.parents[0];
        auto& gx = nx.grad_buffer();
        const auto n = static_cast<Eigen::Index>(nx.data.size());
        const ConstArrayMap v(nx.data.data(), n);
        const Eigen::ArrayXd sg = 1.0 / (1.0 + (-v).exp());
        ArrayMap(gx.data(), n) += ConstArrayMap(self.grad.data(), n) * sg * (1.0 + v * (1.0 - sg));
    });
}

Tensor softmax(const Tensor& x) {
    const std::size_t d = x.dim(-1);
    const std::size_t rows = x.size() / d;
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double* yr = out.data() + r * d;
        const double mx = *std::max_element(xr, xr + d);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < d; ++j) yr[j] /= s;
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [d, rows](Node& self) {
        auto& gx = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = self.grad.data() + r * d;
            const double* y = self.data.data() + r * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (g[j] - dot);
        }
    });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    if (q.rank() < 2 || k.rank() < 2 || v.rank() < 2) throw DimensionError("attention operands need rank >= 2");
    const std::size_t n = q.dim(-2), dmodel = q.dim(-1), m = k.dim(-2);
    if (k.dim(-1) != dmodel || v.dim(-1) != dmodel || v.dim(-2) != m || k.size() / (m * dmodel) != q.size() / (n * dmodel) ||
        v.size() != k.size()) {
        throw DimensionError("attention operand shapes disagree: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                             ", v " + shape_str(v.shape()));
    }
    if (heads == 0 || dmodel % heads != 0) {
        throw ConfigError("attention width " + std::to_string(dmodel) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    const std::size_t batch = q.size() / (n * dmodel);
    const std::size_t dh = dmodel / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto N = static_cast<Eigen::Index>(n), M = static_cast<Eigen::Index>(m), DH = static_cast<Eigen::Index>(dh),
               D = static_cast<Eigen::Index>(dmodel);

    std::vector<double> out(q.size());
    auto probs = std::make_shared<std::vector<double>>(batch * heads * n * m);
    RowMat scores(N, M);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            ConstStridedMap qh(q.values().data() + b * n * dmodel + h * dh, N, DH, Eigen::OuterStride<>(D));
            ConstStridedMap kh(k.values().data() + b * m * dmodel + h * dh, M, DH, Eigen::OuterStride<>(D));
            ConstStridedMap vh(v.values().data() + b * m * dmodel + h * dh, M, DH, Eigen::OuterStride<>(D));
            MatMap p(probs->data() + (b * heads + h) * n * m, N, M);
            scores.noalias() = sc * (qh * kh.transpose());
            p = (scores.colwise() - scores.rowwise().maxCoeff()).array().exp().matrix();
            p.array().colwise() /= p.rowwise().sum().array();
            StridedMap(out.data() + b * n * dmodel + h * dh, N, DH, Eigen::OuterStride<>(D)).noalias() = p * vh;
        }
    }
    return detail::make_result(q.shape(), std::move(out), {q, k, v}, [=](Node& self) {
        Node& nq = *self.parents[0];
        Node& nk = *self.parents[1];
        Node& nv = *self.parents[2];
        double* gq = nq.requires_grad ? nq.grad_buffer().data() : nullptr;
        double* gk = nk.requires_grad ? nk.grad_buffer().data() : nullptr;
        double* gv = nv.requires_grad ? nv.grad_buffer().data() : nullptr;
        RowMat dp(N, M);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t qo = b * n * dmodel + h * dh, ko = b * m * dmodel + h * dh;
                ConstStridedMap go(self.grad.data() + qo, N, DH, Eigen::OuterStride<>(D));
                ConstStridedMap qh(nq.data.data() + qo, N, DH, Eigen::OuterStride<>(D));
                ConstStridedMap kh(nk.data.data() + ko, M, DH, Eigen::OuterStride<>(D));
                ConstStridedMap vh(nv.data.data() + ko, M, DH, Eigen::OuterStride<>(D));
                ConstMatMap p(probs->data() + (b * heads + h) * n * m, N, M);
                if (gv) StridedMap(gv + ko, M, DH, Eigen::OuterStride<>(D)).noalias() += p.transpose() * go;
                dp.noalias() = go * vh.transpose();
                // softmax backward: ds = p * (dp - rowsum(dp * p)), folded with the 1/sqrt(dh) scale
                for (Eigen::Index r = 0; r < N; ++r) {
                    const double dot = dp.row(r).dot(p.row(r));
                    for (Eigen::Index c = 0; c < M; ++c) dp(r, c) = sc * p(r, c) * (dp(r, c) - dot);
                }
                if (gq) StridedMap(gq + qo, N, DH, Eigen::OuterStride<>(D)).noalias() += dp * kh;
                if (gk) StridedMap(gk + ko, M, DH, Eigen::OuterStride<>(D)).noalias() += dp.transpose() * qh;
            }
        }
    });
}

Tensor sinusoidal_embedding(double index, std::size_t dim) {
    const double idx[1] = {index};
    return reshape(sinusoidal_embedding(std::span<const double>(idx, 1), dim), Shape{dim});
}

Tensor sinusoidal_embedding(std::span<const double> indices, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) throw ConfigError("sinusoidal embedding dimension must be even and positive, got " + std::to_string(dim));
    if (indices.empty()) throw DimensionError("sinusoidal embedding of zero indices");
    const std::size_t half = dim / 2;
    std::vector<double> freq(half);
    for (std::size_t j = 0; j < half; ++j) {
        freq[j] = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
    }
    std::vector<double> out(indices.size() * dim);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        for (std::size_t j = 0; j < half; ++j) {
            const double a = indices[r] * freq[j];
            out[r * dim + 2 * j] = std::sin(a);
            out[r * dim + 2 * j + 1] = std::cos(a);
        }
    }
    return Tensor(Shape{indices.size(), dim}, std::move(out));
}

}  // namespace himar::ops
