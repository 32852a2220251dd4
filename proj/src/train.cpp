// SPDX-License-Identifier: Apache-2.0
#include "himar/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "himar/errors.hpp"

namespace himar {

AdamW::AdamW(const nn::ParamStore& store) {
    for (const auto& p : store.params()) {
        m.emplace_back(p.tensor.size(), 0.0);
        v.emplace_back(p.tensor.size(), 0.0);
    }
}

void AdamW::step(const nn::ParamStore& store, const TrainConfig& cfg, double lr) {
    const auto params = store.params();
    if (params.size() != m.size()) throw DimensionError("optimizer state does not match the parameter list");
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor w = params[i].tensor;
        const auto g = w.grad();
        auto x = w.mutable_values();
        auto& mi = m[i];
        auto& vi = v[i];
        const double shrink = params[i].decay ? 1.0 - lr * cfg.weight_decay : 1.0;
        for (std::size_t k = 0; k < x.size(); ++k) {
            mi[k] = cfg.beta1 * mi[k] + (1.0 - cfg.beta1) * g[k];
            vi[k] = cfg.beta2 * vi[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = mi[k] / bc1, vhat = vi[k] / bc2;
            x[k] = x[k] * shrink - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
    const double warmup = std::floor(cfg.warmup_fraction * static_cast<double>(total_steps));
    if (warmup < 1.0) return cfg.lr;
    return cfg.lr * std::min(1.0, static_cast<double>(step + 1) / warmup);
}

std::size_t planned_steps(const TrainConfig& cfg, std::size_t dataset_size) {
    if (cfg.max_steps > 0) return cfg.max_steps;
    const std::size_t per_epoch = (dataset_size + cfg.batch_size - 1) / cfg.batch_size;
    return cfg.epochs * per_epoch;
}

Ema::Ema(const nn::ParamStore& store, double m) : momentum(m), shadow(store.snapshot()) {
    if (m < 0.0 || m > 1.0) throw ConfigError("EMA momentum must lie in [0, 1]");
}

void Ema::update(const nn::ParamStore& store) {
    const auto params = store.params();
    if (params.size() != shadow.size()) throw DimensionError("EMA shadow does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto x = params[i].tensor.values();
        auto& s = shadow[i];
        for (std::size_t k = 0; k < x.size(); ++k) s[k] = momentum * s[k] + (1.0 - momentum) * x[k];
    }
}

Trainer::Trainer(HiMarModel& m, const TrainConfig& c, const Dataset& d, const NormStats& s)
    : model(m), cfg(c), data(d), stats(s), opt(m.store), ema(m.store, c.ema_momentum) {
    cfg.validate();
    if (data.size() == 0) throw ConfigError("training data is empty");
    const ModelConfig& mc = model.cfg;
    if (data.height != mc.image_size || data.width != mc.image_size || data.channels != mc.channels)
        throw ConfigError("dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) + "x" +
                          std::to_string(data.channels) + " but the model expects " + std::to_string(mc.image_size) + "x" +
                          std::to_string(mc.image_size) + "x" + std::to_string(mc.channels));
    if (data.n_classes > mc.n_classes)
        throw ConfigError("dataset has " + std::to_string(data.n_classes) + " classes but model.n_classes is " + std::to_string(mc.n_classes));
    total_steps = planned_steps(cfg, data.size());
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
    const std::size_t n = data.size();
    std::vector<std::size_t> out;
    out.reserve(cfg.batch_size);
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const std::size_t pos = step * cfg.batch_size + i;
        const std::size_t epoch = pos / n;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            Rng rng = Rng(cfg.seed, Stream::data).fork(epoch);
            for (std::size_t k = n; k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k)]);
            cached_epoch = epoch;
        }
        out.push_back(perm[pos % n]);
    }
    return out;
}

StepRecord Trainer::step() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto idx = batch_indices(steps_done);
    std::vector<Image> images;
    std::vector<std::size_t> labels;
    for (std::size_t i : idx) {
        images.push_back(data.images[i]);
        labels.push_back(data.labels[i]);
    }
    const TokenBatch batch = make_token_batch(model.cfg, images, labels, stats);
    model.store.zero_grad();
    const JointLoss loss = joint_loss(model, batch, cfg, cfg.seed, steps_done);
    const double lr = learning_rate(cfg, steps_done, total_steps);
    StepRecord rec{steps_done, loss.l1_value(), loss.l2_value(), lr, 0.0};
    backward(loss.total);
    opt.step(model.store, cfg, lr);
    ema.update(model.store);
    ++steps_done;
    wall_s += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.wall_s = wall_s;
    return rec;
}

bool Trainer::finished() const { return steps_done >= total_steps || (cfg.time_budget_s > 0.0 && wall_s >= cfg.time_budget_s); }

void Trainer::run(const std::function<void(const StepRecord&)>& on_step, const std::function<bool()>& should_stop) {
    while (!finished()) {
        if (should_stop && should_stop()) break;
        const StepRecord rec = step();
        if (on_step) on_step(rec);
    }
}

}  // namespace himar
