// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "himar/checkpoint.hpp"
#include "himar/config.hpp"
#include "himar/dataset.hpp"
#include "himar/errors.hpp"
#include "himar/eval.hpp"
#include "himar/generate.hpp"
#include "himar/gradcheck.hpp"
#include "himar/masking.hpp"
#include "himar/model.hpp"
#include "himar/train.hpp"

namespace py = pybind11;
using namespace himar;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// [N, H, W, C] float64
Array images_to_array(const std::vector<Image>& images) {
    if (images.empty()) return Array(std::vector<py::ssize_t>{0, 0, 0, 0});
    const Image& f = images.front();
    Array out({images.size(), f.height, f.width, f.channels});
    double* p = out.mutable_data();
    for (const Image& img : images) p = std::copy(img.pixels.begin(), img.pixels.end(), p);
    return out;
}

std::vector<Image> array_to_images(const Array& a) {
    if (a.ndim() != 4) throw DimensionError("expected an [N, H, W, C] array");
    const auto n = static_cast<std::size_t>(a.shape(0)), h = static_cast<std::size_t>(a.shape(1)), w = static_cast<std::size_t>(a.shape(2)),
               c = static_cast<std::size_t>(a.shape(3));
    std::vector<Image> out(n, Image(h, w, c));
    const double* p = a.data();
    for (Image& img : out) {
        std::copy(p, p + img.pixels.size(), img.pixels.begin());
        p += img.pixels.size();
    }
    return out;
}

Features array_to_features(const Array& a) {
    if (a.ndim() != 2) throw DimensionError("expected an [n, dim] feature array");
    Features f{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)), {}};
    f.values.assign(a.data(), a.data() + a.size());
    return f;
}

Dataset to_dataset(const Array& images, const std::vector<std::size_t>& labels, std::size_t n_classes) {
    Dataset ds;
    ds.images = array_to_images(images);
    if (ds.images.size() != labels.size()) throw DimensionError("one label per image is required");
    ds.labels = labels;
    ds.n_classes = n_classes;
    if (!ds.images.empty()) {
        ds.height = ds.images[0].height;
        ds.width = ds.images[0].width;
        ds.channels = ds.images[0].channels;
    }
    return ds;
}

// A model together with its run config, dataset statistics, and optional trainer.
class Session {
   public:
    Session(const RunConfig& cfg, std::uint64_t init_seed) : config(cfg), model(std::make_unique<HiMarModel>(cfg.model, init_seed)) {
        stats = NormStats::identity(cfg.model.channels);
    }
    Session(const Checkpoint& ck, bool use_ema) : config(ck.config), stats(ck.stats), model(model_from_checkpoint(ck, use_ema)) {}

    std::vector<std::pair<std::size_t, std::pair<double, double>>> train(const Array& images, const std::vector<std::size_t>& labels,
                                                                         std::size_t steps) {
        data = std::make_unique<Dataset>(to_dataset(images, labels, config.model.n_classes));
        if (!trainer) {
            stats = compute_stats(data->images);
            trainer = std::make_unique<Trainer>(*model, config.train, *data, stats);
        } else {
            // The trainer keeps a reference to the dataset; rebind it to the new copy.
            auto next = std::make_unique<Trainer>(*model, config.train, *data, stats);
            next->opt = trainer->opt;
            next->ema = trainer->ema;
            next->steps_done = trainer->steps_done;
            next->wall_s = trainer->wall_s;
            trainer = std::move(next);
        }
        std::vector<std::pair<std::size_t, std::pair<double, double>>> log;
        py::gil_scoped_release release;
        for (std::size_t i = 0; i < steps && !trainer->finished(); ++i) {
            const StepRecord r = trainer->step();
            log.push_back({r.step, {r.l1, r.l2}});
        }
        return log;
    }

    Array generate(const std::vector<std::size_t>& class_ids, std::uint64_t seed) {
        std::vector<Image> images;
        {
            py::gil_scoped_release release;
            images = himar::generate(*model, class_ids, config.generate, stats, seed).images;
        }
        return images_to_array(images);
    }

    void save(const std::string& path) const { save_checkpoint(path, capture_checkpoint(config, *model, stats, trainer.get())); }

    RunConfig config;
    NormStats stats;
    std::unique_ptr<HiMarModel> model;
    std::unique_ptr<Dataset> data;
    std::unique_ptr<Trainer> trainer;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Hierarchical masked autoregressive image generation";

    auto base = py::register_exception<Error>(m, "HimarError");
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("preset", &RunConfig::preset, py::arg("name"))
        .def_static(
            "parse", [](const std::string& text, const RunConfig* base) { return RunConfig::parse(text, base ? *base : RunConfig{}); },
            py::arg("text"), py::arg("base") = nullptr)
        .def("serialize", &RunConfig::serialize)
        .def("validate", &RunConfig::validate)
        .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
        .def("__repr__", &RunConfig::serialize);

    m.def("config_keys", &config_key_docs);
    m.def("inference_schedule", &inference_schedule, py::arg("n"), py::arg("steps"));

    m.def(
        "make_shapes_dataset",
        [](std::size_t count, std::uint64_t seed) {
            const Dataset ds = make_shapes_dataset(count, seed);
            return py::make_tuple(images_to_array(ds.images), ds.labels);
        },
        py::arg("count"), py::arg("seed") = 0, "Procedural 32x32 shapes: returns (images [N, 32, 32, 1], labels).");

    m.def(
        "frechet_distance", [](const Array& a, const Array& b) { return frechet_distance(array_to_features(a), array_to_features(b)); },
        py::arg("a"), py::arg("b"));

    py::class_<FeatureExtractor>(m, "FeatureExtractor")
        .def(py::init<std::uint64_t, std::size_t>(), py::arg("seed") = 1234, py::arg("channels") = 1)
        .def("extract",
             [](const FeatureExtractor& fx, const Array& images) {
                 const Features f = fx.extract(array_to_images(images));
                 Array out({f.n, f.dim});
                 std::copy(f.values.begin(), f.values.end(), out.mutable_data());
                 return out;
             })
        .def("hash", &FeatureExtractor::hash);

    m.def(
        "fd_proxy",
        [](const Array& samples, const Array& reference, const FeatureExtractor& fx) {
            return fd_proxy(array_to_images(samples), array_to_images(reference), fx);
        },
        py::arg("samples"), py::arg("reference"), py::arg("extractor"));

    m.def(
        "gradcheck",
        [](double tolerance, std::uint64_t seed, bool tiny_loss) {
            py::list rows;
            for (const GradcheckRow& r : run_gradcheck(tolerance, seed, tiny_loss))
                rows.append(py::dict(py::arg("name") = r.name, py::arg("coords") = r.coords, py::arg("rel_error") = r.rel_error,
                                     py::arg("passed") = r.pass));
            return rows;
        },
        py::arg("tolerance") = 1e-4, py::arg("seed") = 7, py::arg("tiny_loss") = false);

    py::class_<Session>(m, "Model")
        .def(py::init<const RunConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
        .def_static(
            "load", [](const std::string& path, bool use_ema) { return std::make_unique<Session>(load_checkpoint(path), use_ema); },
            py::arg("path"), py::arg("use_ema") = true)
        .def_property_readonly("config", [](const Session& s) { return s.config; })
        .def_property_readonly("param_count", [](const Session& s) { return s.model->store.scalar_count(); })
        .def_property_readonly("steps_done", [](const Session& s) { return s.trainer ? s.trainer->steps_done : 0; })
        .def("train", &Session::train, py::arg("images"), py::arg("labels"), py::arg("steps"),
             "Runs up to `steps` optimizer steps; returns [(step, (l1, l2)), ...].")
        .def("generate", &Session::generate, py::arg("class_ids"), py::arg("seed") = 0, "Returns images as [N, H, W, C] in [0, 1].")
        .def("save", &Session::save, py::arg("path"));
}
