// SPDX-License-Identifier: Apache-2.0
#include "himar/heads.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

#include "himar/errors.hpp"

namespace himar {

namespace {

std::atomic<std::uint64_t> g_empty_loss{0};

double cosine_f(double t, double total) {
    constexpr double s = 0.008;
    const double c = std::cos((t / total + s) / (1.0 + s) * 0.5 * std::numbers::pi);
    return c * c;
}

}  // namespace

NoiseSchedule::NoiseSchedule(NoiseKind kind, std::size_t steps) {
    if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
    betas_.resize(steps);
    const auto total = static_cast<double>(steps);
    for (std::size_t i = 0; i < steps; ++i) {
        if (kind == NoiseKind::cosine) {
            const double b = 1.0 - cosine_f(static_cast<double>(i + 1), total) / cosine_f(static_cast<double>(i), total);
            betas_[i] = std::min(b, 0.999);
        } else {
            const double scale = 1000.0 / total;
            const double lo = scale * 1e-4, hi = scale * 0.02;
            betas_[i] = lo + (hi - lo) * static_cast<double>(i) / (total - 1.0);
        }
    }
    alpha_bars_.resize(steps);
    double prod = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
        prod *= 1.0 - betas_[i];
        alpha_bars_[i] = prod;
    }
}

std::vector<std::size_t> NoiseSchedule::respaced(std::size_t count) const {
    const std::size_t total = steps();
    if (count < 1) throw ConfigError("sampling needs at least one diffusion step");
    if (count > total) throw ConfigError("sampling steps " + std::to_string(count) + " exceed schedule length " + std::to_string(total));
    std::vector<std::size_t> ts;
    if (count == 1) return {total};
    for (std::size_t j = 0; j < count; ++j) {
        const double pos = static_cast<double>(total - 1) * static_cast<double>(j) / static_cast<double>(count - 1);
        const auto t = 1 + static_cast<std::size_t>(std::llround(pos));
        if (ts.empty() || ts.back() != t) ts.push_back(t);
    }
    return ts;
}

std::vector<double> add_noise(const NoiseSchedule& schedule, std::span<const double> x, std::size_t t, std::span<const double> eps) {
    if (t < 1 || t > schedule.steps()) throw ConfigError("timestep " + std::to_string(t) + " outside 1.." + std::to_string(schedule.steps()));
    if (x.size() != eps.size()) throw DimensionError("add_noise: noise and token sizes differ");
    const double ab = schedule.alpha_bar(t);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = sa * x[i] + sn * eps[i];
    return out;
}

TimestepEmbedder::TimestepEmbedder(nn::ParamStore& store, const std::string& name, std::size_t w, Rng& rng) : width(w) {
    fc1 = nn::Linear(store, name + ".fc1", w, w, rng);
    fc2 = nn::Linear(store, name + ".fc2", w, w, rng);
}

Tensor TimestepEmbedder::operator()(std::span<const double> t) const {
    return fc2(ops::silu(fc1(ops::sinusoidal_embedding(t, width))));
}

MlpHead::MlpHead(nn::ParamStore& store, const std::string& name, std::size_t token_dim, std::size_t cond_dim, std::size_t w,
                 std::size_t depth, std::size_t ffn_mult, Rng& rng)
    : width(w) {
    time_embed = TimestepEmbedder(store, name + ".time_embed", w, rng);
    cond_embed = nn::Linear(store, name + ".cond_embed", cond_dim, w, rng);
    input_proj = nn::Linear(store, name + ".input_proj", token_dim, w, rng);
    for (std::size_t i = 0; i < depth; ++i) {
        const std::string bn = name + ".block" + std::to_string(i);
        Block blk;
        blk.ada = nn::Linear(store, bn + ".ada", w, 3 * w, rng, nn::Init::zero);
        blk.ffn = nn::FeedForward(store, bn + ".ffn", w, ffn_mult, rng);
        blocks.push_back(std::move(blk));
    }
    final_ada = nn::Linear(store, name + ".final_ada", w, 2 * w, rng, nn::Init::zero);
    output_proj = nn::Linear(store, name + ".output_proj", w, token_dim, rng, nn::Init::zero);
}

Tensor MlpHead::predict(const Tensor& x_t, std::span<const double> t, const Tensor& z) const {
    if (x_t.rank() != 2 || z.rank() != 2 || x_t.dim(0) != z.dim(0) || t.size() != x_t.dim(0)) {
        throw DimensionError("mlp head: latents " + shape_str(x_t.shape()) + ", conditions " + shape_str(z.shape()) + " and " +
                             std::to_string(t.size()) + " timesteps must agree on the token count");
    }
    const Tensor c = ops::silu(ops::add(time_embed(t), cond_embed(z)));
    Tensor h = input_proj(x_t);
    for (const auto& blk : blocks) {
        const Tensor m = blk.ada(c);
        const Tensor shift = ops::slice(m, -1, 0, width);
        const Tensor scale = ops::slice(m, -1, width, width);
        const Tensor gate = ops::slice(m, -1, 2 * width, width);
        h = nn::gated_residual(h, gate, blk.ffn(nn::modulate(ops::layer_norm(h), shift, scale)));
    }
    const Tensor m = final_ada(c);
    return output_proj(nn::modulate(ops::layer_norm(h), ops::slice(m, -1, 0, width), ops::slice(m, -1, width, width)));
}

DitHead::DitHead(nn::ParamStore& store, const std::string& name, std::size_t token_dim, std::size_t cond_dim, std::size_t w,
                 std::size_t depth, std::size_t h, std::size_t ffn_mult, Rng& rng)
    : width(w), heads(h) {
    if (w % h != 0) throw ConfigError(name + ": width not divisible by heads");
    time_embed = TimestepEmbedder(store, name + ".time_embed", w, rng);
    cond_embed = nn::Linear(store, name + ".cond_embed", cond_dim, w, rng);
    input_proj = nn::Linear(store, name + ".input_proj", token_dim, w, rng);
    for (std::size_t i = 0; i < depth; ++i) {
        const std::string bn = name + ".block" + std::to_string(i);
        Block blk;
        blk.ada1 = nn::Linear(store, bn + ".ada1", w, w, rng);
        blk.ada2 = nn::Linear(store, bn + ".ada2", w, 6 * w, rng, nn::Init::zero);
        blk.qkv = nn::Linear(store, bn + ".attn.qkv", w, 3 * w, rng, nn::Init::xavier, false);
        blk.proj = nn::Linear(store, bn + ".attn.proj", w, w, rng, nn::Init::xavier, false);
        blk.ffn = nn::FeedForward(store, bn + ".ffn", w, ffn_mult, rng);
        blocks.push_back(std::move(blk));
    }
    output_proj = nn::Linear(store, name + ".output_proj", w, token_dim, rng, nn::Init::zero);
}

Tensor DitHead::predict(const Tensor& y, std::span<const double> t, const Tensor& z) const {
    if (y.rank() != 3 || z.rank() != 3 || y.dim(0) != z.dim(0) || y.dim(1) != z.dim(1) || t.size() != y.dim(0)) {
        throw DimensionError("transformer head: latents " + shape_str(y.shape()) + ", conditions " + shape_str(z.shape()) + " and " +
                             std::to_string(t.size()) + " timesteps disagree");
    }
    const std::size_t batch = y.dim(0);
    const Tensor temb = ops::reshape(time_embed(t), Shape{batch, 1, width});
    const Tensor c = ops::add(cond_embed(z), temb);
    Tensor h = input_proj(y);
    for (const auto& blk : blocks) {
        const Tensor m = blk.ada2(ops::silu(blk.ada1(c)));
        const Tensor alpha1 = ops::slice(m, -1, 0, width);
        const Tensor beta1 = ops::slice(m, -1, width, width);
        const Tensor gamma1 = ops::slice(m, -1, 2 * width, width);
        const Tensor alpha2 = ops::slice(m, -1, 3 * width, width);
        const Tensor beta2 = ops::slice(m, -1, 4 * width, width);
        const Tensor gamma2 = ops::slice(m, -1, 5 * width, width);
        const Tensor qkv = blk.qkv(nn::modulate(ops::layer_norm(h), beta1, alpha1));
        const Tensor att = ops::attention(ops::slice(qkv, -1, 0, width), ops::slice(qkv, -1, width, width),
                                          ops::slice(qkv, -1, 2 * width, width), heads);
        h = nn::gated_residual(h, gamma1, blk.proj(att));
        h = nn::gated_residual(h, gamma2, blk.ffn(nn::modulate(ops::layer_norm(h), beta2, alpha2)));
    }
    return output_proj(h);
}

Tensor dit_head_predict(const DitHead& head, const Tensor& latents, std::span<const double> t, const Tensor& z,
                        std::span<const std::uint8_t> known, const Tensor& known_values) {
    const std::size_t rows = latents.size() / latents.dim(-1);
    if (known.size() != rows) throw DimensionError("known flags must cover every grid position");
    const bool any_known = std::any_of(known.begin(), known.end(), [](std::uint8_t k) { return k != 0; });
    if (any_known && !known_values.defined()) throw DimensionError("known_values missing for unmasked positions");
    if (!any_known) return head.predict(latents, t, z);
    if (known_values.shape() != latents.shape()) throw DimensionError("known_values must match the latent shape");
    const std::size_t d = latents.dim(-1);
    std::vector<double> y(latents.values().begin(), latents.values().end());
    for (std::size_t r = 0; r < rows; ++r) {
        if (known[r]) std::copy_n(known_values.values().begin() + static_cast<std::ptrdiff_t>(r * d), d, y.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    return head.predict(Tensor(latents.shape(), std::move(y)), t, z);
}

std::uint64_t empty_loss_warnings() { return g_empty_loss.load(); }

Tensor mlp_diffusion_loss(const MlpHead& head, const NoiseSchedule& schedule, const Tensor& z, const Tensor& x, std::size_t draws,
                          Rng& rng) {
    if (x.rank() != 2 || z.rank() != 2 || x.dim(0) != z.dim(0)) {
        throw DimensionError("mlp loss: tokens " + shape_str(x.shape()) + " and conditions " + shape_str(z.shape()) + " disagree");
    }
    if (draws == 0) throw ConfigError("diffusion loss needs at least one noise draw");
    const std::size_t m = x.dim(0), d = x.dim(1);
    std::vector<std::size_t> rows(m * draws);
    for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = r % m;
    std::vector<double> t(rows.size()), eps(rows.size() * d), xt(rows.size() * d);
    const auto xv = x.values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t step = 1 + static_cast<std::size_t>(rng.below(schedule.steps()));
        t[r] = static_cast<double>(step);
        const double ab = schedule.alpha_bar(step);
        const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        for (std::size_t j = 0; j < d; ++j) {
            const double e = rng.normal();
            eps[r * d + j] = e;
            xt[r * d + j] = sa * xv[rows[r] * d + j] + sn * e;
        }
    }
    const Tensor zr = draws == 1 ? z : ops::take_rows(z, rows);
    const Tensor pred = head.predict(Tensor(Shape{rows.size(), d}, std::move(xt)), t, zr);
    return ops::mse(pred, Tensor(Shape{rows.size(), d}, std::move(eps)));
}

Tensor dit_diffusion_loss(const DitHead& head, const NoiseSchedule& schedule, const Tensor& z, const Tensor& x,
                          std::span<const std::uint8_t> mask, std::size_t draws, Rng& rng) {
    if (x.rank() != 3 || z.rank() != 3 || x.dim(0) != z.dim(0) || x.dim(1) != z.dim(1)) {
        throw DimensionError("transformer loss: tokens " + shape_str(x.shape()) + " and conditions " + shape_str(z.shape()) + " disagree");
    }
    if (draws == 0) throw ConfigError("diffusion loss needs at least one noise draw");
    const std::size_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
    if (mask.size() != batch * n) throw DimensionError("mask must have one flag per grid position");
    std::vector<std::size_t> supervised;
    for (std::size_t r = 0; r < draws * batch * n; ++r) {
        if (mask[r % (batch * n)]) supervised.push_back(r);
    }
    if (supervised.empty()) {
        g_empty_loss.fetch_add(1);
        return Tensor::scalar(0.0);
    }
    const std::size_t total = draws * batch;
    std::vector<double> t(total), y(total * n * d), eps(supervised.size() * d);
    const auto xv = x.values();
    std::size_t k = 0;
    for (std::size_t s = 0; s < total; ++s) {
        const std::size_t step = 1 + static_cast<std::size_t>(rng.below(schedule.steps()));
        t[s] = static_cast<double>(step);
        const double ab = schedule.alpha_bar(step);
        const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        const std::size_t b = s % batch;
        for (std::size_t i = 0; i < n; ++i) {
            const double* src = xv.data() + (b * n + i) * d;
            double* dst = y.data() + (s * n + i) * d;
            if (mask[b * n + i]) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double e = rng.normal();
                    eps[k * d + j] = e;
                    dst[j] = sa * src[j] + sn * e;
                }
                ++k;
            } else {
                std::copy_n(src, d, dst);
            }
        }
    }
    Tensor zr = z;
    if (draws > 1) {
        std::vector<Tensor> reps(draws, z);
        zr = ops::concat(reps, 0);
    }
    const Tensor pred = head.predict(Tensor(Shape{total, n, d}, std::move(y)), t, zr);
    const Tensor picked = ops::take_rows(pred, supervised);
    return ops::mse(picked, Tensor(Shape{supervised.size(), d}, std::move(eps)));
}

std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double scale) {
    if (scale == 1.0) return {cond.begin(), cond.end()};
    if (cond.size() != uncond.size()) throw DimensionError("guidance branches differ in size");
    std::vector<double> out(cond.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
    return out;
}

namespace {

// One ancestral reverse pass. eps_fn(x, t) returns the (guided) noise estimate;
// noise_fn(buffer) fills fresh standard normals in row order.
template <class EpsFn, class NoiseFn>
std::vector<double> reverse_diffusion(const NoiseSchedule& schedule, std::vector<double> x, std::size_t d, const SamplerOptions& opts,
                                      EpsFn&& eps_fn, NoiseFn&& noise_fn) {
    const auto ts = schedule.respaced(opts.steps);
    const bool clip = !opts.bounds.lo.empty();
    if (clip && (opts.bounds.lo.size() != d || opts.bounds.hi.size() != d)) throw DimensionError("clip bounds must have token_dim entries");
    std::vector<double> z(x.size());
    for (std::size_t i = ts.size(); i-- > 0;) {
        const std::size_t t = ts[i];
        const double ab = schedule.alpha_bar(t);
        const double ab_prev = i > 0 ? schedule.alpha_bar(ts[i - 1]) : 1.0;
        const double beta = 1.0 - ab / ab_prev;
        const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double c_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
        const double inv_sa = 1.0 / std::sqrt(ab), sn = std::sqrt(1.0 - ab);
        const std::vector<double> eps = eps_fn(x, t);
        for (std::size_t k = 0; k < x.size(); ++k) {
            double x0 = (x[k] - sn * eps[k]) * inv_sa;
            if (clip) x0 = std::clamp(x0, opts.bounds.lo[k % d], opts.bounds.hi[k % d]);
            x[k] = c_x0 * x0 + c_xt * x[k];
        }
        if (i > 0) {
            const double var = opts.variance == SamplerVariance::beta ? beta : beta * (1.0 - ab_prev) / (1.0 - ab);
            const double sd = std::sqrt(var);
            noise_fn(z);
            for (std::size_t k = 0; k < x.size(); ++k) x[k] += sd * z[k];
        }
    }
    return x;
}

}  // namespace

std::vector<double> sample_mlp_head(const MlpHead& head, const NoiseSchedule& schedule, const Tensor& z_cond, const Guidance& guidance,
                                    const SamplerOptions& opts, std::span<Rng* const> row_rngs) {
    NoGradGuard no_grad;
    const std::size_t m = z_cond.dim(0);
    const std::size_t d = head.output_proj.weight.dim(1);
    if (row_rngs.size() != m) throw DimensionError("one rng per sampled token is required");
    if (guidance.active() && guidance.uncond.shape() != z_cond.shape()) throw DimensionError("guidance branches differ in shape");
    const bool guided = guidance.active();
    const Tensor z_all = guided ? ops::concat(std::vector<Tensor>{z_cond, guidance.uncond}, 0) : z_cond;
    const std::size_t rows = guided ? 2 * m : m;

    auto fill = [&](std::vector<double>& buf) {
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t j = 0; j < d; ++j) buf[r * d + j] = row_rngs[r]->normal();
        }
    };
    std::vector<double> x(m * d);
    fill(x);
    auto eps_fn = [&](const std::vector<double>& xs, std::size_t t) {
        std::vector<double> in(rows * d);
        std::copy(xs.begin(), xs.end(), in.begin());
        if (guided) std::copy(xs.begin(), xs.end(), in.begin() + static_cast<std::ptrdiff_t>(m * d));
        const std::vector<double> tt(rows, static_cast<double>(t));
        const Tensor e = head.predict(Tensor(Shape{rows, d}, std::move(in)), tt, z_all);
        const auto ev = e.values();
        if (!guided) return std::vector<double>(ev.begin(), ev.end());
        return cfg_combine(ev.subspan(0, m * d), ev.subspan(m * d), guidance.scale);
    };
    return reverse_diffusion(schedule, std::move(x), d, opts, eps_fn, fill);
}

std::vector<double> sample_dit_head(const DitHead& head, const NoiseSchedule& schedule, const Tensor& z_cond, const Guidance& guidance,
                                    std::span<const std::uint8_t> known, std::span<const double> known_values,
                                    const SamplerOptions& opts, std::span<Rng* const> rngs) {
    NoGradGuard no_grad;
    const std::size_t batch = z_cond.dim(0), n = z_cond.dim(1);
    const std::size_t d = head.output_proj.weight.dim(1);
    if (rngs.size() != batch) throw DimensionError("one rng per grid is required");
    if (known.size() != batch * n || known_values.size() != batch * n * d) throw DimensionError("known flags/values must cover the grid");
    if (guidance.active() && guidance.uncond.shape() != z_cond.shape()) throw DimensionError("guidance branches differ in shape");
    const bool guided = guidance.active();
    const Tensor z_all = guided ? ops::concat(std::vector<Tensor>{z_cond, guidance.uncond}, 0) : z_cond;
    const std::size_t grids = guided ? 2 * batch : batch;

    auto fill = [&](std::vector<double>& buf) {
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t k = 0; k < n * d; ++k) buf[b * n * d + k] = rngs[b]->normal();
        }
    };
    auto inject = [&](std::vector<double>& xs) {
        for (std::size_t r = 0; r < batch * n; ++r) {
            if (known[r]) std::copy_n(known_values.begin() + static_cast<std::ptrdiff_t>(r * d), d, xs.begin() + static_cast<std::ptrdiff_t>(r * d));
        }
    };
    std::vector<double> x(batch * n * d);
    fill(x);
    auto eps_fn = [&](std::vector<double>& xs, std::size_t t) {
        inject(xs);
        std::vector<double> in(grids * n * d);
        std::copy(xs.begin(), xs.end(), in.begin());
        if (guided) std::copy(xs.begin(), xs.end(), in.begin() + static_cast<std::ptrdiff_t>(batch * n * d));
        const std::vector<double> tt(grids, static_cast<double>(t));
        const Tensor e = head.predict(Tensor(Shape{grids, n, d}, std::move(in)), tt, z_all);
        const auto ev = e.values();
        if (!guided) return std::vector<double>(ev.begin(), ev.end());
        return cfg_combine(ev.subspan(0, batch * n * d), ev.subspan(batch * n * d), guidance.scale);
    };
    std::vector<double> out = reverse_diffusion(schedule, std::move(x), d, opts, eps_fn, fill);
    inject(out);
    return out;
}

}  // namespace himar
