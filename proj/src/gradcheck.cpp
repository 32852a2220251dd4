// SPDX-License-Identifier: Apache-2.0
#include "himar/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "himar/backbone.hpp"
#include "himar/dataset.hpp"
#include "himar/heads.hpp"
#include "himar/model.hpp"
#include "himar/ops.hpp"

namespace himar {

GradcheckResult check_gradients(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& leaves, std::size_t max_coords, Rng& rng,
                                double step) {
    for (Tensor t : leaves) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    backward(loss_fn());

    std::size_t total = 0;
    for (const Tensor& t : leaves) total += t.size();
    // (leaf, index) pairs to check.
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    if (total <= max_coords) {
        for (std::size_t l = 0; l < leaves.size(); ++l) {
            for (std::size_t i = 0; i < leaves[l].size(); ++i) coords.emplace_back(l, i);
        }
    } else {
        // At least one coordinate per leaf, the rest uniformly over all scalars.
        for (std::size_t l = 0; l < leaves.size() && coords.size() < max_coords; ++l) coords.emplace_back(l, rng.below(leaves[l].size()));
        while (coords.size() < max_coords) {
            std::uint64_t k = rng.below(total);
            std::size_t l = 0;
            while (k >= leaves[l].size()) k -= leaves[l++].size();
            coords.emplace_back(l, static_cast<std::size_t>(k));
        }
    }

    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    NoGradGuard no_grad;
    for (const auto& [l, i] : coords) {
        Tensor t = leaves[l];
        const double analytic = t.grad()[i];
        const double saved = t.values()[i];
        t.mutable_values()[i] = saved + step;
        const double up = loss_fn().item();
        t.mutable_values()[i] = saved - step;
        const double down = loss_fn().item();
        t.mutable_values()[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        diff2 += (analytic - numeric) * (analytic - numeric);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    return {coords.size(), std::sqrt(diff2) / denom};
}

namespace {

Tensor randn(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(shape);
    for (double& v : t.mutable_values()) v = scale * rng.normal();
    return t;
}

// sum(w * y) with fixed random weights w, so every output entry matters.
Tensor weighted_sum(const Tensor& y, Rng& rng) { return ops::sum(ops::mul(y, randn(y.shape(), rng))); }

void randomize(const nn::ParamStore& store, Rng& rng, double scale) {
    for (const auto& p : store.params()) {
        Tensor t = p.tensor;
        for (double& v : t.mutable_values()) v += scale * rng.normal();
    }
}

std::vector<Tensor> leaves_of(const nn::ParamStore& store) {
    std::vector<Tensor> out;
    for (const auto& p : store.params()) out.push_back(p.tensor);
    return out;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(double tolerance, std::uint64_t seed, bool tiny_loss) {
    std::vector<GradcheckRow> rows;
    Rng rng(seed, Stream::eval);
    auto record = [&](const std::string& name, const std::function<Tensor()>& f, const std::vector<Tensor>& leaves, std::size_t max_coords = 400) {
        const GradcheckResult r = check_gradients(f, leaves, max_coords, rng);
        rows.push_back({name, r.coords, r.rel_error, r.rel_error < tolerance});
    };

    const Shape shapes[3] = {{5}, {3, 4}, {2, 3, 4}};
    auto shape_tag = [](const Shape& s) { return shape_str(s); };

    // Elementwise and reductions, three shapes each.
    for (const Shape& s : shapes) {
        const std::string tag = shape_tag(s);
        Tensor a = randn(s, rng), b = randn(s, rng);
        record("add " + tag, [&, a, b] { Rng w(11, Stream::eval); return weighted_sum(ops::add(a, b), w); }, {a, b});
        record("sub " + tag, [&, a, b] { Rng w(12, Stream::eval); return weighted_sum(ops::sub(a, b), w); }, {a, b});
        record("mul " + tag, [&, a, b] { Rng w(13, Stream::eval); return weighted_sum(ops::mul(a, b), w); }, {a, b});
        record("add_scalar " + tag, [&, a] { Rng w(14, Stream::eval); return weighted_sum(ops::add_scalar(a, 0.7), w); }, {a});
        record("scale " + tag, [&, a] { Rng w(15, Stream::eval); return weighted_sum(ops::scale(a, -1.3), w); }, {a});
        record("sum " + tag, [a] { return ops::sum(ops::mul(a, a)); }, {a});
        record("mean " + tag, [a] { return ops::mean(ops::mul(a, a)); }, {a});
        record("mse " + tag, [a, b] { return ops::mse(a, b); }, {a, b});
        record("gelu " + tag, [&, a] { Rng w(16, Stream::eval); return weighted_sum(ops::gelu(a), w); }, {a});
        record("silu " + tag, [&, a] { Rng w(17, Stream::eval); return weighted_sum(ops::silu(a), w); }, {a});
        record("softmax " + tag, [&, a] { Rng w(18, Stream::eval); return weighted_sum(ops::softmax(a), w); }, {a});
        record("layer_norm " + tag, [&, a] { Rng w(19, Stream::eval); return weighted_sum(ops::layer_norm(a), w); }, {a});
    }
    // Broadcasting pairs.
    const std::pair<Shape, Shape> bshapes[3] = {{{3, 4}, {4}}, {{2, 3, 4}, {3, 1}}, {{2, 1, 4}, {1, 3, 4}}};
    for (const auto& [sa, sb] : bshapes) {
        const std::string tag = shape_tag(sa) + "x" + shape_tag(sb);
        Tensor a = randn(sa, rng), b = randn(sb, rng);
        record("add broadcast " + tag, [&, a, b] { Rng w(21, Stream::eval); return weighted_sum(ops::add(a, b), w); }, {a, b});
        record("sub broadcast " + tag, [&, a, b] { Rng w(22, Stream::eval); return weighted_sum(ops::sub(a, b), w); }, {a, b});
        record("mul broadcast " + tag, [&, a, b] { Rng w(23, Stream::eval); return weighted_sum(ops::mul(a, b), w); }, {a, b});
    }
    // Shape plumbing.
    {
        const Shape ss[3] = {{6, 4}, {2, 3, 4}, {2, 5, 3}};
        for (const Shape& s : ss) {
            const std::string tag = shape_tag(s);
            Tensor a = randn(s, rng), b = randn(s, rng);
            record("reshape " + tag, [&, a] { Rng w(31, Stream::eval); return weighted_sum(ops::reshape(a, Shape{a.size()}), w); }, {a});
            record("slice " + tag, [&, a] { Rng w(32, Stream::eval); return weighted_sum(ops::slice(a, -1, 1, 2), w); }, {a});
            record("concat " + tag, [&, a, b] {
                Rng w(33, Stream::eval);
                const std::vector<Tensor> parts{a, b};
                return weighted_sum(ops::concat(parts, 0), w);
            }, {a, b});
            record("take_rows " + tag, [&, a] {
                Rng w(34, Stream::eval);
                const std::size_t rows_n = a.size() / a.dim(-1);
                const std::vector<std::size_t> idx{rows_n - 1, 0, rows_n - 1, 1};
                return weighted_sum(ops::take_rows(a, idx), w);
            }, {a});
        }
    }
    // Matrix products and attention.
    {
        const std::pair<Shape, Shape> ms[3] = {{{4, 5}, {5, 2}}, {{2, 3, 4}, {4, 5}}, {{2, 3, 4}, {2, 4, 3}}};
        for (const auto& [sa, sb] : ms) {
            const std::string tag = shape_tag(sa) + "x" + shape_tag(sb);
            Tensor a = randn(sa, rng), b = randn(sb, rng);
            record("matmul " + tag, [&, a, b] { Rng w(41, Stream::eval); return weighted_sum(ops::matmul(a, b), w); }, {a, b});
        }
        const Shape ls[3] = {{3, 4}, {2, 3, 4}, {5, 4}};
        for (const Shape& s : ls) {
            Tensor x = randn(s, rng), w = randn({4, 3}, rng), bias = randn({3}, rng);
            record("linear " + shape_tag(s), [&, x, w, bias] { Rng r(42, Stream::eval); return weighted_sum(ops::linear(x, w, bias), r); }, {x, w, bias});
        }
        const std::pair<Shape, std::size_t> as[3] = {{{3, 2}, 1}, {{2, 4, 6}, 2}, {{2, 3, 8}, 4}};
        for (const auto& [s, h] : as) {
            Tensor q = randn(s, rng), k = randn(s, rng), v = randn(s, rng);
            record("attention " + shape_tag(s) + " heads=" + std::to_string(h), [&, q, k, v, h = h] {
                Rng r(43, Stream::eval);
                return weighted_sum(ops::attention(q, k, v, h), r);
            }, {q, k, v});
        }
        Tensor idx_probe = randn({3, 4}, rng);
        record("matmul+layer_norm composite", [&, idx_probe] {
            Rng r(44, Stream::eval);
            Tensor w = randn({4, 4}, r);
            return weighted_sum(ops::layer_norm(ops::matmul(idx_probe, w)), r);
        }, {idx_probe});
    }

    // Blocks.
    {
        nn::ParamStore store;
        Rng init(seed + 1, Stream::init);
        ScaleAwareBlock blk(store, "blk", 8, 2, 2, 6, init);
        nn::FeedForward ffn(store, "ffn", 8, 2, init);
        randomize(store, rng, 0.3);
        Tensor z = randn({2, 3, 8}, rng), v = randn({6}, rng), x = randn({2, 4}, rng);
        std::vector<Tensor> leaves = leaves_of(store);
        leaves.push_back(z);
        leaves.push_back(v);
        record("scale-aware block", [&] { Rng r(51, Stream::eval); return weighted_sum(blk(z, v), r); }, leaves, 600);
        Tensor x8 = randn({2, 8}, rng);
        record("feed-forward", [&] { Rng r(52, Stream::eval); return weighted_sum(ffn(x8), r); }, {ffn.fc1.weight, ffn.fc1.bias, ffn.fc2.weight, ffn.fc2.bias, x8});
    }
    {
        nn::ParamStore store;
        Rng init(seed + 2, Stream::init);
        MlpHead head(store, "h1", 4, 6, 8, 2, 2, init);
        randomize(store, rng, 0.3);
        Tensor xt = randn({5, 4}, rng), z = randn({5, 6}, rng);
        const std::vector<double> t{1, 10, 100, 500, 1000};
        std::vector<Tensor> leaves = leaves_of(store);
        leaves.push_back(xt);
        leaves.push_back(z);
        record("mlp head", [&] { Rng r(53, Stream::eval); return weighted_sum(head.predict(xt, t, z), r); }, leaves, 600);
    }
    {
        nn::ParamStore store;
        Rng init(seed + 3, Stream::init);
        DitHead head(store, "h2", 4, 6, 8, 2, 2, 2, init);
        randomize(store, rng, 0.3);
        Tensor y = randn({2, 4, 4}, rng), z = randn({2, 4, 6}, rng);
        const std::vector<double> t{3, 700};
        std::vector<Tensor> leaves = leaves_of(store);
        leaves.push_back(y);
        leaves.push_back(z);
        record("transformer head", [&] { Rng r(54, Stream::eval); return weighted_sum(head.predict(y, t, z), r); }, leaves, 600);
    }
    {
        // Gradient of the diffusion loss into the conditioning tokens.
        nn::ParamStore store;
        Rng init(seed + 4, Stream::init);
        MlpHead head(store, "h1", 4, 6, 8, 1, 2, init);
        randomize(store, rng, 0.3);
        const NoiseSchedule schedule(NoiseKind::cosine, 1000);
        Tensor x = randn({6, 4}, rng), z = randn({6, 6}, rng);
        record("diffusion loss into z", [&] {
            Rng r(55, Stream::noise);
            return mlp_diffusion_loss(head, schedule, z, x, 2, r);
        }, {z});
    }
    {
        ModelConfig small;
        small.image_size = 8;
        small.patch_size = 2;
        small.n_classes = 3;
        small.depth = 2;
        small.width = 16;
        small.heads = 2;
        small.ffn_mult = 2;
        small.head1_depth = 1;
        small.head1_width = 8;
        small.head2_depth = 1;
        small.head2_width = 8;
        small.head2_heads = 2;
        small.head_ffn_mult = 2;
        HiMarModel model(small, seed + 5);
        randomize(model.store, rng, 0.2);
        Tensor tokens = randn({2, small.dense_tokens(), small.token_dim()}, rng);
        Tensor pivot = randn({2, small.low_tokens(), small.width}, rng);
        std::vector<double> maskv(2 * small.dense_tokens());
        for (std::size_t i = 0; i < maskv.size(); ++i) maskv[i] = (i % 3 == 0) ? 1.0 : 0.0;
        Tensor mask(Shape{2, small.dense_tokens(), 1}, maskv);
        const std::vector<std::size_t> ids{1, small.n_classes};
        std::vector<Tensor> leaves = leaves_of(model.store);
        leaves.push_back(tokens);
        leaves.push_back(pivot);
        record("backbone forward (pivot segment)", [&] {
            Rng r(56, Stream::eval);
            return weighted_sum(model.backbone.forward({ids, tokens, mask, 1, pivot}), r);
        }, leaves, 600);
    }
    if (tiny_loss) {
        const RunConfig rc = RunConfig::preset("tiny");
        HiMarModel model(rc.model, seed + 6);
        randomize(model.store, rng, 0.02);
        const Dataset ds = make_shapes_dataset(2, seed);
        const TokenBatch batch = make_token_batch(rc.model, ds.images, ds.labels, NormStats{{0.2}, {0.3}});
        record("tiny joint training loss", [&] { return joint_loss(model, batch, rc.train, seed, 0).total; }, leaves_of(model.store), 60);
    }
    return rows;
}

}  // namespace himar
