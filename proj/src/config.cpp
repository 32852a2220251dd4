// SPDX-License-Identifier: Apache-2.0
#include "himar/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "himar/errors.hpp"
#include "himar/format.hpp"

namespace himar {

std::string to_string(PivotMode m) {
    switch (m) {
        case PivotMode::conditional:
            return "conditional";
        case PivotMode::visual:
            return "visual";
        case PivotMode::none:
            return "none";
    }
    return "?";
}

std::string to_string(ScaleVector s) {
    switch (s) {
        case ScaleVector::sinusoidal:
            return "sinusoidal";
        case ScaleVector::learned:
            return "learned";
        case ScaleVector::none:
            return "none";
    }
    return "?";
}

std::string to_string(NoiseKind k) { return k == NoiseKind::cosine ? "cosine" : "linear"; }

std::string to_string(SamplerVariance v) { return v == SamplerVariance::beta ? "beta" : "posterior"; }

PivotMode parse_pivot_mode(const std::string& s) {
    if (s == "conditional" || s == "conditional_tokens") return PivotMode::conditional;
    if (s == "visual" || s == "visual_tokens") return PivotMode::visual;
    if (s == "none") return PivotMode::none;
    throw ConfigError("invalid pivot mode '" + s + "' (expected conditional, visual, or none)");
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

struct Field {
    const char* section;
    const char* key;
    const char* doc;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define HIMAR_SIZE(SEC, MEMBER, DOC)                                                                     \
    Field {                                                                                              \
        #SEC, #MEMBER, DOC, [](const RunConfig& c) { return std::to_string(c.SEC.MEMBER); },            \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.SEC.MEMBER = parse_size(k, v); } \
    }
#define HIMAR_U64(SEC, MEMBER, DOC)                                                                     \
    Field {                                                                                             \
        #SEC, #MEMBER, DOC, [](const RunConfig& c) { return std::to_string(c.SEC.MEMBER); },           \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.SEC.MEMBER = parse_u64(k, v); } \
    }
#define HIMAR_REAL(SEC, MEMBER, DOC)                                                                     \
    Field {                                                                                              \
        #SEC, #MEMBER, DOC, [](const RunConfig& c) { return format_double(c.SEC.MEMBER); },             \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.SEC.MEMBER = parse_real(k, v); } \
    }
#define HIMAR_BOOL(SEC, MEMBER, DOC)                                                                     \
    Field {                                                                                              \
        #SEC, #MEMBER, DOC, [](const RunConfig& c) { return std::string(c.SEC.MEMBER ? "true" : "false"); }, \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.SEC.MEMBER = parse_bool(k, v); } \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        HIMAR_SIZE(model, image_size, "square image side in pixels"),
        HIMAR_SIZE(model, channels, "image channels (1 grayscale, 3 color)"),
        HIMAR_SIZE(model, n_classes, "number of class labels"),
        HIMAR_SIZE(model, patch_size, "tokenizer patch side (both scales)"),
        HIMAR_SIZE(model, depth, "backbone blocks"),
        HIMAR_SIZE(model, width, "backbone width"),
        HIMAR_SIZE(model, heads, "backbone attention heads"),
        HIMAR_SIZE(model, ffn_mult, "backbone FFN hidden multiplier"),
        HIMAR_SIZE(model, head1_depth, "phase-1 MLP head residual blocks"),
        HIMAR_SIZE(model, head1_width, "phase-1 MLP head width"),
        HIMAR_SIZE(model, head2_depth, "phase-2 transformer head blocks"),
        HIMAR_SIZE(model, head2_width, "phase-2 transformer head width"),
        HIMAR_SIZE(model, head2_heads, "phase-2 transformer head attention heads"),
        HIMAR_SIZE(model, head_ffn_mult, "FFN hidden multiplier of both heads"),
        Field{"model", "scale_vector", "sinusoidal | learned | none",
              [](const RunConfig& c) { return to_string(c.model.scale_vector); },
              [](RunConfig& c, const std::string& k, const std::string& v) {
                  if (v == "sinusoidal") c.model.scale_vector = ScaleVector::sinusoidal;
                  else if (v == "learned") c.model.scale_vector = ScaleVector::learned;
                  else if (v == "none") c.model.scale_vector = ScaleVector::none;
                  else throw ConfigError(k + ": expected sinusoidal, learned, or none");
              }},
        Field{"model", "pivot_mode", "conditional | visual | none",
              [](const RunConfig& c) { return to_string(c.model.pivot_mode); },
              [](RunConfig& c, const std::string&, const std::string& v) { c.model.pivot_mode = parse_pivot_mode(v); }},
        HIMAR_BOOL(model, detach_pivot, "stop phase-2 gradients at the pivot"),
        Field{"model", "noise", "cosine | linear noise schedule",
              [](const RunConfig& c) { return to_string(c.model.noise); },
              [](RunConfig& c, const std::string& k, const std::string& v) {
                  if (v == "cosine") c.model.noise = NoiseKind::cosine;
                  else if (v == "linear") c.model.noise = NoiseKind::linear;
                  else throw ConfigError(k + ": expected cosine or linear");
              }},
        HIMAR_SIZE(model, train_timesteps, "diffusion training timesteps T"),

        HIMAR_REAL(train, lr, "peak learning rate (constant after warmup)"),
        HIMAR_REAL(train, warmup_fraction, "fraction of total steps with linear warmup"),
        HIMAR_REAL(train, beta1, "AdamW first-moment decay"),
        HIMAR_REAL(train, beta2, "AdamW second-moment decay"),
        HIMAR_REAL(train, adam_eps, "AdamW epsilon"),
        HIMAR_REAL(train, weight_decay, "decoupled weight decay"),
        HIMAR_SIZE(train, epochs, "epochs over the dataset (when max_steps = 0)"),
        HIMAR_SIZE(train, batch_size, "images per optimizer step"),
        HIMAR_SIZE(train, max_steps, "optimizer step cap (0 = from epochs)"),
        HIMAR_REAL(train, time_budget_s, "wall-clock cap in seconds (0 = none)"),
        HIMAR_REAL(train, ema_momentum, "EMA momentum"),
        HIMAR_REAL(train, class_drop, "probability of replacing the class with the null class"),
        HIMAR_REAL(train, loss_weight1, "weight of the phase-1 loss"),
        HIMAR_REAL(train, loss_weight2, "weight of the phase-2 loss"),
        HIMAR_SIZE(train, head1_batch_mul, "noise draws per supervised phase-1 token"),
        HIMAR_SIZE(train, head2_batch_mul, "noise draws per phase-2 sample"),
        Field{"train", "ratio1", "phase-1 masking ratio sampler",
              [](const RunConfig& c) { return c.train.ratio1.to_string(); },
              [](RunConfig& c, const std::string&, const std::string& v) { c.train.ratio1 = RatioSampler::parse(v); }},
        Field{"train", "ratio2", "phase-2 masking ratio sampler",
              [](const RunConfig& c) { return c.train.ratio2.to_string(); },
              [](RunConfig& c, const std::string&, const std::string& v) { c.train.ratio2 = RatioSampler::parse(v); }},
        HIMAR_SIZE(train, checkpoint_every, "steps between checkpoints (0 = only final)"),
        HIMAR_SIZE(train, log_every, "steps between loss log rows"),
        HIMAR_U64(train, seed, "training seed"),

        HIMAR_SIZE(generate, steps1, "phase-1 autoregressive steps"),
        HIMAR_SIZE(generate, steps2, "phase-2 autoregressive steps"),
        HIMAR_REAL(generate, cfg_scale1, "phase-1 guidance scale"),
        HIMAR_REAL(generate, cfg_scale2, "phase-2 guidance scale"),
        HIMAR_BOOL(generate, cfg_phase1, "apply guidance while predicting low-resolution tokens"),
        HIMAR_BOOL(generate, cfg_phase2, "apply guidance while predicting dense tokens"),
        HIMAR_SIZE(generate, sample_steps1, "reverse-diffusion steps of the phase-1 head"),
        HIMAR_SIZE(generate, sample_steps2, "reverse-diffusion steps of the phase-2 head"),
        HIMAR_BOOL(generate, clip_denoised, "clip denoised estimates to the pixel range"),
        Field{"generate", "variance", "beta | posterior reverse-step variance",
              [](const RunConfig& c) { return to_string(c.generate.variance); },
              [](RunConfig& c, const std::string& k, const std::string& v) {
                  if (v == "beta") c.generate.variance = SamplerVariance::beta;
                  else if (v == "posterior") c.generate.variance = SamplerVariance::posterior;
                  else throw ConfigError(k + ": expected beta or posterior");
              }},
        HIMAR_BOOL(generate, use_ema, "sample with EMA parameters"),
        HIMAR_SIZE(generate, batch_size, "images generated per batch"),

        HIMAR_SIZE(eval, n_samples, "generated images per metric"),
        HIMAR_SIZE(eval, timing_images, "images timed per sweep point"),
        HIMAR_SIZE(eval, warmup_images, "untimed warmup images per sweep point"),
        HIMAR_U64(eval, extractor_seed, "feature extractor weight seed"),
        HIMAR_U64(eval, seed, "evaluation sampling seed"),
    };
    return table;
}

#undef HIMAR_SIZE
#undef HIMAR_U64
#undef HIMAR_REAL
#undef HIMAR_BOOL

const Field& find_field(const std::string& dotted) {
    for (const auto& f : fields()) {
        if (dotted == std::string(f.section) + "." + f.key) return f;
    }
    throw ConfigError("unknown config key '" + dotted + "'");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void ModelConfig::validate() const {
    if (image_size == 0 || channels == 0 || n_classes == 0 || patch_size == 0) throw ConfigError("model extents must be positive");
    if (image_size % (2 * patch_size) != 0) throw ConfigError("model.image_size must be divisible by 2 * model.patch_size");
    if (depth == 0 || width == 0 || heads == 0 || ffn_mult == 0) throw ConfigError("backbone sizes must be positive");
    if (width % heads != 0) throw ConfigError("model.width must be divisible by model.heads");
    if (width % 2 != 0 || head1_width % 2 != 0 || head2_width % 2 != 0) throw ConfigError("widths must be even");
    if (head1_depth == 0 || head1_width == 0 || head2_width == 0 || head2_heads == 0 || head_ffn_mult == 0) {
        throw ConfigError("head sizes must be positive (head2_depth may be 0)");
    }
    if (head2_width % head2_heads != 0) throw ConfigError("model.head2_width must be divisible by model.head2_heads");
    if (train_timesteps < 2) throw ConfigError("model.train_timesteps must be >= 2");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("train.warmup_fraction must be in [0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta1/beta2 must be in [0, 1)");
    if (!(adam_eps > 0.0) || weight_decay < 0.0) throw ConfigError("train.adam_eps must be positive, weight_decay non-negative");
    if (batch_size == 0 || (epochs == 0 && max_steps == 0)) throw ConfigError("train.batch_size and epochs/max_steps must be positive");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ConfigError("train.ema_momentum must be in [0, 1]");
    if (!(class_drop >= 0.0 && class_drop <= 1.0)) throw ConfigError("train.class_drop must be in [0, 1]");
    if (loss_weight1 < 0.0 || loss_weight2 < 0.0) throw ConfigError("loss weights must be non-negative");
    if (head1_batch_mul == 0 || head2_batch_mul == 0) throw ConfigError("head batch multipliers must be >= 1");
    if (time_budget_s < 0.0) throw ConfigError("train.time_budget_s must be non-negative");
    if (log_every == 0) throw ConfigError("train.log_every must be >= 1");
}

void GenerateConfig::validate() const {
    if (steps1 == 0 || steps2 == 0) throw ConfigError("generate.steps1/steps2 must be >= 1");
    if (sample_steps1 == 0 || sample_steps2 == 0) throw ConfigError("generate.sample_steps1/2 must be >= 1");
    if (cfg_scale1 < 0.0 || cfg_scale2 < 0.0) throw ConfigError("guidance scales must be non-negative");
    if (batch_size == 0) throw ConfigError("generate.batch_size must be >= 1");
}

void EvalConfig::validate() const {
    if (n_samples == 0) throw ConfigError("eval.n_samples must be >= 1");
}

RunConfig RunConfig::preset(const std::string& name) {
    RunConfig c;
    if (name == "tiny") {
        // Desk scale: 32x32 grayscale, 4x4 low grid and 8x8 dense grid.
        c.model = ModelConfig{};
        c.train.lr = 5e-4;
        // max_steps is a cap that wall-clock runs rarely reach, so warmup is about 100 steps.
        c.train.warmup_fraction = 0.001;
        c.train.batch_size = 16;
        c.train.ema_momentum = 0.995;
        c.train.max_steps = 100000;
        // 16 low tokens: 8 steps keeps the two-tokens-per-step pace of 32 steps over 64 low tokens.
        c.generate.steps1 = 8;
        c.generate.steps2 = 4;
        return c;
    }
    struct Row {
        const char* name;
        std::size_t depth, width, heads, h1_depth, h1_width, h2_depth, h2_width, h2_heads;
    };
    static const Row rows[] = {
        {"b", 24, 768, 12, 6, 1024, 6, 512, 8},
        {"l", 32, 1024, 16, 8, 1280, 8, 512, 8},
        {"h", 40, 1280, 16, 12, 1536, 12, 768, 12},
    };
    for (const Row& r : rows) {
        if (name != r.name) continue;
        c.model.image_size = 256;
        c.model.channels = 3;
        c.model.n_classes = 1000;
        c.model.patch_size = 16;
        c.model.depth = r.depth;
        c.model.width = r.width;
        c.model.heads = r.heads;
        c.model.head1_depth = r.h1_depth;
        c.model.head1_width = r.h1_width;
        c.model.head2_depth = r.h2_depth;
        c.model.head2_width = r.h2_width;
        c.model.head2_heads = r.h2_heads;
        c.train.batch_size = 256;
        c.train.warmup_fraction = 100.0 / 800.0;
        c.generate.steps1 = 32;
        c.generate.steps2 = 4;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (expected tiny, b, l, or h)");
}

void RunConfig::set(const std::string& dotted_key, const std::string& value) { find_field(dotted_key).set(*this, dotted_key, value); }

RunConfig RunConfig::parse(const std::string& text, const RunConfig& base) {
    RunConfig c = base;
    std::set<std::string> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "model" && section != "train" && section != "generate" && section != "eval") {
                throw ConfigError("line " + std::to_string(line_no) + ": unknown section '" + section + "'");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.find('.') == std::string::npos) {
            if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key '" + key + "' outside a section");
            key = section + "." + key;
        }
        if (!seen.insert(key).second) throw ConfigError("duplicate config key '" + key + "'");
        c.set(key, value);
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path, const RunConfig& base) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot read config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), base);
}

std::string RunConfig::serialize() const {
    std::ostringstream os;
    std::string section;
    for (const auto& f : fields()) {
        if (section != f.section) {
            if (!section.empty()) os << '\n';
            section = f.section;
            os << '[' << section << "]\n";
        }
        os << f.key << " = " << f.get(*this) << '\n';
    }
    return os.str();
}

void RunConfig::validate() const {
    model.validate();
    train.validate();
    generate.validate();
    eval.validate();
}

std::vector<std::string> config_key_docs() {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(std::string(f.section) + "." + f.key + "  " + f.doc);
    return out;
}

}  // namespace himar
