// SPDX-License-Identifier: Apache-2.0
//
// himar: dataset generation, training, sampling, evaluation, sweeps, and
// gradient checks. Data goes to stdout, diagnostics to stderr.
#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "himar/checkpoint.hpp"
#include "himar/config.hpp"
#include "himar/dataset.hpp"
#include "himar/errors.hpp"
#include "himar/eval.hpp"
#include "himar/format.hpp"
#include "himar/generate.hpp"
#include "himar/gradcheck.hpp"
#include "himar/train.hpp"

namespace fs = std::filesystem;
using namespace himar;

namespace {

std::atomic<bool> g_interrupted{false};
extern "C" void on_sigint(int) { g_interrupted = true; }

// Flags shared by every subcommand that builds a RunConfig.
struct CommonFlags {
    std::string preset = "tiny";
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps1, steps2;
    std::optional<double> cfg_scale;
    std::optional<bool> cfg_phase1, cfg_phase2;
    std::optional<std::string> pivot_mode;
    std::vector<std::string> sets;

    void add_to(CLI::App* app, bool with_preset) {
        if (with_preset) app->add_option("--preset", preset, "Base preset")->check(CLI::IsMember({"tiny", "b", "l", "h"}));
        app->add_option("--config", config_path, "key=value run config applied over the base");
        app->add_option("--seed", seed, "Seed");
        app->add_option("--steps1", steps1, "Phase-1 generation steps");
        app->add_option("--steps2", steps2, "Phase-2 generation steps");
        app->add_option("--cfg-scale", cfg_scale, "Guidance scale for both phases");
        app->add_flag("--cfg-phase1,!--no-cfg-phase1", cfg_phase1, "Guidance in phase 1");
        app->add_flag("--cfg-phase2,!--no-cfg-phase2", cfg_phase2, "Guidance in phase 2");
        app->add_option("--pivot-mode", pivot_mode, "Pivot mode")->check(CLI::IsMember({"conditional", "visual", "none"}));
        app->add_option("--set", sets, "Extra section.key=value override (repeatable)");
    }

    // Config file, then --set, then the dedicated flags.
    void apply(RunConfig& rc) const {
        if (!config_path.empty()) rc = RunConfig::load(config_path, rc);
        for (const std::string& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
            rc.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (steps1) rc.generate.steps1 = *steps1;
        if (steps2) rc.generate.steps2 = *steps2;
        if (cfg_scale) rc.generate.cfg_scale1 = rc.generate.cfg_scale2 = *cfg_scale;
        if (cfg_phase1) rc.generate.cfg_phase1 = *cfg_phase1;
        if (cfg_phase2) rc.generate.cfg_phase2 = *cfg_phase2;
        if (pivot_mode) rc.model.pivot_mode = parse_pivot_mode(*pivot_mode);
    }
};

bool same_model(const ModelConfig& a, const ModelConfig& b) {
    RunConfig ra, rb;
    ra.model = a;
    rb.model = b;
    return ra.serialize() == rb.serialize();
}

std::size_t parameter_count(const nn::ParamStore& store) {
    std::size_t n = 0;
    for (const auto& p : store.params()) n += p.tensor.size();
    return n;
}

struct LoadedModel {
    Checkpoint ckpt;
    RunConfig config;
    std::unique_ptr<HiMarModel> model;
};

// Loads a checkpoint and applies the flags on top of its embedded config.
// Model settings are fixed by the checkpoint.
LoadedModel load_for_inference(const std::string& path, const CommonFlags& flags) {
    LoadedModel out;
    out.ckpt = load_checkpoint(path);
    out.config = out.ckpt.config;
    flags.apply(out.config);
    if (!same_model(out.config.model, out.ckpt.config.model))
        throw ConfigError("model settings cannot be changed for an existing checkpoint");
    out.config.validate();
    out.model = model_from_checkpoint(out.ckpt, out.config.generate.use_ema);
    return out;
}

std::string ckpt_name(std::size_t step) {
    std::ostringstream os;
    os << "step_" << std::setw(8) << std::setfill('0') << step << ".himr";
    return os.str();
}

int cmd_gen_data(const std::string& out, std::size_t count, std::uint64_t seed) {
    const Dataset ds = make_shapes_dataset(count, seed);
    write_dataset(out, ds);
    std::cerr << "wrote " << ds.size() << " images to " << out << '\n';
    return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& data_path, const std::string& out_dir, const std::string& resume,
              std::optional<std::size_t> max_steps, std::optional<double> time_budget) {
    std::optional<Checkpoint> ckpt;
    RunConfig rc;
    if (!resume.empty()) {
        ckpt = load_checkpoint(resume);
        rc = ckpt->config;
    } else {
        rc = RunConfig::preset(flags.preset);
    }
    flags.apply(rc);
    if (flags.seed) rc.train.seed = *flags.seed;
    if (max_steps) rc.train.max_steps = *max_steps;
    if (time_budget) rc.train.time_budget_s = *time_budget;
    rc.validate();
    if (ckpt && !same_model(rc.model, ckpt->config.model))
        throw ConfigError("model settings cannot be changed when resuming");

    const Dataset data = read_dataset(data_path);
    fs::create_directories(out_dir);

    std::unique_ptr<HiMarModel> model;
    NormStats stats;
    if (ckpt) {
        model = model_from_checkpoint(*ckpt, false);
        stats = ckpt->stats;
    } else {
        model = std::make_unique<HiMarModel>(rc.model, rc.train.seed);
        stats = compute_stats(data.images);
    }
    Trainer trainer(*model, rc.train, data, stats);
    if (ckpt) restore_trainer(trainer, *ckpt);

    const fs::path log_path = fs::path(out_dir) / "loss.csv";
    const bool fresh_log = !fs::exists(log_path);
    std::ofstream log(log_path, std::ios::app);
    if (!log) throw FormatError("cannot open " + log_path.string());
    if (fresh_log) log << "step,l1,l2,lr,wall_s\n";

    auto save = [&] {
        const Checkpoint c = capture_checkpoint(rc, *model, stats, &trainer);
        save_checkpoint((fs::path(out_dir) / ckpt_name(trainer.steps_done)).string(), c);
        save_checkpoint((fs::path(out_dir) / "last.himr").string(), c);
    };

    std::signal(SIGINT, on_sigint);
    std::cerr << "training " << parameter_count(model->store) << " parameters for " << trainer.total_steps << " steps";
    if (rc.train.time_budget_s > 0) std::cerr << " or " << rc.train.time_budget_s << " s";
    std::cerr << ", starting at step " << trainer.steps_done << '\n';
    trainer.run(
        [&](const StepRecord& r) {
            log << r.step << ',' << format_double(r.l1) << ',' << format_double(r.l2) << ',' << format_double(r.lr) << ','
                << format_double(r.wall_s) << '\n';
            log.flush();
            if (rc.train.log_every > 0 && (r.step + 1) % rc.train.log_every == 0)
                std::cerr << "step " << r.step + 1 << "  l1 " << r.l1 << "  l2 " << r.l2 << "  lr " << r.lr << "  " << std::fixed
                          << std::setprecision(1) << r.wall_s << std::defaultfloat << std::setprecision(6) << " s\n";
            if (rc.train.checkpoint_every > 0 && trainer.steps_done % rc.train.checkpoint_every == 0) save();
        },
        [] { return g_interrupted.load(); });
    save();
    if (g_interrupted) std::cerr << "interrupted; saved step " << trainer.steps_done << '\n';
    std::cout << (fs::path(out_dir) / "last.himr").string() << '\n';
    return 0;
}

int cmd_sample(const CommonFlags& flags, const std::string& ckpt_path, std::size_t class_id, std::size_t count, const std::string& out_dir) {
    LoadedModel lm = load_for_inference(ckpt_path, flags);
    const GenerateConfig& g = lm.config.generate;
    const std::uint64_t seed = flags.seed.value_or(0);
    if (class_id >= lm.model->cfg.n_classes)
        throw ConfigError("class id " + std::to_string(class_id) + " out of range (n_classes " + std::to_string(lm.model->cfg.n_classes) + ")");
    if (count == 0) return 0;
    fs::create_directories(out_dir);
    const std::string ext = lm.model->cfg.channels == 1 ? ".pgm" : ".ppm";
    for (std::size_t begin = 0; begin < count; begin += g.batch_size) {
        const std::size_t n = std::min(g.batch_size, count - begin);
        const std::vector<std::size_t> ids(n, class_id);
        const GenerateOutput res = generate(*lm.model, ids, g, lm.ckpt.stats, seed, begin);
        for (std::size_t i = 0; i < n; ++i) {
            std::ostringstream name;
            name << "class" << class_id << "_seed" << seed << "_k" << g.steps1 << "-" << g.steps2 << "_" << std::setw(4) << std::setfill('0')
                 << begin + i << ext;
            const fs::path p = fs::path(out_dir) / name.str();
            write_netpbm(p.string(), res.images[i]);
            std::cout << p.string() << '\n';
        }
    }
    return 0;
}

struct Reference {
    Dataset data;
    Features features;
};

Reference load_reference(const std::string& path, const FeatureExtractor& fx) {
    Reference r{read_dataset(path), {}};
    r.features = fx.extract(r.data.images);
    return r;
}

int cmd_eval(const CommonFlags& flags, const std::string& ckpt_path, const std::string& data_path, std::optional<std::size_t> n) {
    LoadedModel lm = load_for_inference(ckpt_path, flags);
    if (n) lm.config.eval.n_samples = *n;
    if (flags.seed) lm.config.eval.seed = *flags.seed;
    const EvalConfig& e = lm.config.eval;
    const FeatureExtractor fx(e.extractor_seed, lm.model->cfg.channels);
    const Reference ref = load_reference(data_path, fx);

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> labels;
    const std::vector<Image> samples = generate_many(*lm.model, e.n_samples, lm.config.generate, lm.ckpt.stats, e.seed, &labels);
    const double gen_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const Features sf = fx.extract(samples);
    const double fd = frechet_distance(sf, ref.features);

    // Self-distance floor: first half of the reference against the second.
    const std::size_t half = ref.data.size() / 2;
    Features fa{half, ref.features.dim, {}}, fb{ref.data.size() - half, ref.features.dim, {}};
    fa.values.assign(ref.features.values.begin(), ref.features.values.begin() + half * ref.features.dim);
    fb.values.assign(ref.features.values.begin() + half * ref.features.dim, ref.features.values.end());
    const double floor = frechet_distance(fa, fb);

    const LinearProbe probe = LinearProbe::fit(ref.features, ref.data.labels, lm.model->cfg.n_classes);

    std::cout << "fd_proxy=" << format_double(fd) << '\n'
              << "fd_floor=" << format_double(floor) << '\n'
              << "is_proxy=" << format_double(is_proxy(probe, sf)) << '\n'
              << "class_accuracy=" << format_double(probe.accuracy(sf, labels)) << '\n'
              << "n_samples=" << e.n_samples << '\n'
              << "n_reference=" << ref.data.size() << '\n'
              << "seed=" << e.seed << '\n'
              << "ms_per_image=" << format_double(1000.0 * gen_s / static_cast<double>(std::max<std::size_t>(1, e.n_samples))) << '\n'
              << "extractor=" << fx.hash() << '\n';
    return 0;
}

int cmd_sweep(const CommonFlags& flags, const std::string& ckpt_path, const std::string& data_path, const std::string& grid_text,
              std::optional<std::size_t> n, const std::string& out) {
    LoadedModel lm = load_for_inference(ckpt_path, flags);
    if (n) lm.config.eval.n_samples = *n;
    if (flags.seed) lm.config.eval.seed = *flags.seed;
    const FeatureExtractor fx(lm.config.eval.extractor_seed, lm.model->cfg.channels);
    const Reference ref = load_reference(data_path, fx);
    const std::vector<SweepPoint> grid = parse_sweep_grid(grid_text);
    SweepOptions opts{lm.config.generate, lm.config.eval, [](const std::string& msg) { std::cerr << "sweep: " << msg << '\n'; }};
    std::cerr << "extractor " << fx.hash() << '\n';
    const std::vector<SweepRow> rows = run_sweep(*lm.model, lm.ckpt.stats, ref.features, fx, grid, opts);
    if (out.empty() || out == "-") {
        write_sweep_csv(std::cout, rows);
    } else {
        std::ofstream os(out);
        if (!os) throw FormatError("cannot write " + out);
        write_sweep_csv(os, rows);
    }
    return 0;
}

int cmd_gradcheck(double tolerance, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<GradcheckRow> rows = run_gradcheck(tolerance, seed);
    std::size_t failed = 0;
    std::cout << std::left << std::setw(44) << "check" << std::right << std::setw(8) << "coords" << std::setw(13) << "rel_error"
              << "  result\n";
    for (const GradcheckRow& r : rows) {
        std::cout << std::left << std::setw(44) << r.name << std::right << std::setw(8) << r.coords << std::setw(13) << std::scientific
                  << std::setprecision(3) << r.rel_error << std::defaultfloat << "  " << (r.pass ? "pass" : "FAIL") << '\n';
        if (!r.pass) ++failed;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << rows.size() - failed << "/" << rows.size() << " checks passed in " << std::fixed << std::setprecision(1) << secs << " s\n";
    return failed == 0 ? 0 : 1;
}

int cmd_config(const CommonFlags& flags, bool keys) {
    if (keys) {
        for (const std::string& line : config_key_docs()) std::cout << line << '\n';
        return 0;
    }
    RunConfig rc = RunConfig::preset(flags.preset);
    flags.apply(rc);
    if (flags.seed) rc.train.seed = *flags.seed;
    rc.validate();
    std::cout << rc.serialize();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-phase masked autoregressive image generation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Write the procedural shapes dataset");
    std::string gen_out;
    std::size_t gen_count = 10000;
    std::uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "Output dataset file")->required();
    gen->add_option("--count", gen_count, "Number of images");
    gen->add_option("--seed", gen_seed, "Dataset seed");

    CommonFlags train_flags;
    auto* train = app.add_subcommand("train", "Train a model; writes checkpoints and loss.csv to --out");
    std::string train_data, train_out, train_resume;
    std::optional<std::size_t> train_steps;
    std::optional<double> train_budget;
    train_flags.add_to(train, true);
    train->add_option("--data", train_data, "Dataset file")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--resume", train_resume, "Checkpoint to continue from");
    train->add_option("--max-steps", train_steps, "Optimizer step cap");
    train->add_option("--time-budget", train_budget, "Training time cap in seconds");

    CommonFlags sample_flags;
    auto* sample = app.add_subcommand("sample", "Generate images of one class as NetPBM files");
    std::string sample_ckpt, sample_out = ".";
    std::size_t sample_class = 0, sample_count = 1;
    sample_flags.add_to(sample, false);
    sample->add_option("--checkpoint", sample_ckpt, "Checkpoint file")->required();
    sample->add_option("--class", sample_class, "Class id");
    sample->add_option("--count", sample_count, "Number of images");
    sample->add_option("--out", sample_out, "Output directory");

    CommonFlags eval_flags;
    auto* eval = app.add_subcommand("eval", "Report fd_proxy against a reference dataset");
    std::string eval_ckpt, eval_data;
    std::optional<std::size_t> eval_n;
    eval_flags.add_to(eval, false);
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--data", eval_data, "Reference dataset file")->required();
    eval->add_option("--n", eval_n, "Number of generated samples");

    CommonFlags sweep_flags;
    auto* sweep = app.add_subcommand("sweep", "Step-count sweep; writes CSV");
    std::string sweep_ckpt, sweep_data, sweep_grid = "default", sweep_out;
    std::optional<std::size_t> sweep_n;
    sweep_flags.add_to(sweep, false);
    sweep->add_option("--checkpoint", sweep_ckpt, "Checkpoint file")->required();
    sweep->add_option("--data", sweep_data, "Reference dataset file")->required();
    sweep->add_option("--grid", sweep_grid, "'default' or phase1:phase2 pairs such as 8:4,8:2");
    sweep->add_option("--n", sweep_n, "Samples per grid point");
    sweep->add_option("--out", sweep_out, "CSV file (stdout when omitted)");

    auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
    double grad_tol = 1e-4;
    std::uint64_t grad_seed = 7;
    grad->add_option("--tolerance", grad_tol, "Relative error threshold");
    grad->add_option("--seed", grad_seed, "Seed for inputs and coordinates");

    CommonFlags config_flags;
    auto* config = app.add_subcommand("config", "Print the canonical run config");
    bool config_keys = false;
    config_flags.add_to(config, true);
    config->add_flag("--keys", config_keys, "List every accepted key");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*gen) return cmd_gen_data(gen_out, gen_count, gen_seed);
        if (*train) return cmd_train(train_flags, train_data, train_out, train_resume, train_steps, train_budget);
        if (*sample) return cmd_sample(sample_flags, sample_ckpt, sample_class, sample_count, sample_out);
        if (*eval) return cmd_eval(eval_flags, eval_ckpt, eval_data, eval_n);
        if (*sweep) return cmd_sweep(sweep_flags, sweep_ckpt, sweep_data, sweep_grid, sweep_n, sweep_out);
        if (*grad) return cmd_gradcheck(grad_tol, grad_seed);
        if (*config) return cmd_config(config_flags, config_keys);
    } catch (const himar::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
