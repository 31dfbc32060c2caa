// Python surface: numpy-backed access to the core operations (SAP transform,
// dataset synthesis, SAPT io, model forward/attack/defended prediction,
// calibration) plus the run_* command back ends. Everything heavy stays in
// the C++ library; this file only marshals buffers and JSON strings.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <string>
#include <vector>

#include "sapbench/checkpoint.hpp"
#include "sapbench/harness.hpp"
#include "sapbench/metrics.hpp"

namespace py = pybind11;
using namespace sap;

namespace {

Tensor<double> tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(a.shape(i));
    Tensor<double> t(shape);
    std::memcpy(t.data().data(), a.data(), sizeof(double) * static_cast<std::size_t>(a.size()));
    return t;
}

py::array_t<double> array_from_tensor(const Tensor<double>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> a(shape);
    std::memcpy(a.mutable_data(), t.data().data(), sizeof(double) * t.numel());
    return a;
}

ExperimentConfig config_from_json_text(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_experiment_config(doc);
}

// Section parsers stay private to the config module; wrap fragments into a
// whole document to reuse them.
PolicyConfig defense_from_json_text(const std::string& text) {
    if (text.empty()) return NoDefenseConfig{};
    return config_from_json_text("{\"defense\": " + text + "}").defense;
}

AttackSpec attack_from_json_text(const std::string& text) {
    auto attacks = config_from_json_text("{\"attack\": [" + text + "]}").attacks;
    return attacks.at(0);
}

struct PyModel {
    ModelGraph<double> model;
};

std::uint32_t label_checked(std::uint32_t label, std::size_t classes) {
    if (label >= classes) throw InputError("label " + std::to_string(label) + " is out of range");
    return label;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "stochastic activation pruning workbench (C++ core)";
    m.attr("__version__") = kToolVersion;

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def(
        "sap_transform",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& h, std::int64_t draws,
           std::uint64_t seed) {
            RngStream rs(seed);
            return array_from_tensor(sap_transform(tensor_from_array(h), draws, rs));
        },
        py::arg("h"), py::arg("draws"), py::arg("seed"),
        "Sample `draws` entries of h with replacement proportionally to |h|, zero the rest,\n"
        "and rescale survivors by their inverse keep probability (unbiased in expectation).");

    m.def(
        "synth_dataset",
        [](std::size_t n_per_class, std::size_t classes, std::size_t image_size, double noise_std,
           std::uint64_t seed) {
            Dataset<double> ds = synth_dataset<double>(n_per_class, classes, image_size, noise_std, seed);
            py::array_t<std::uint32_t> labels(static_cast<py::ssize_t>(ds.labels.size()));
            std::memcpy(labels.mutable_data(), ds.labels.data(), sizeof(std::uint32_t) * ds.labels.size());
            return py::make_tuple(array_from_tensor(ds.images), labels);
        },
        py::arg("n_per_class"), py::arg("classes"), py::arg("image_size"), py::arg("noise_std"), py::arg("seed"),
        "Class-coded sinusoidal gratings plus Gaussian pixel noise in [0, 255]; returns (images, labels).");

    m.def(
        "write_tensor",
        [](const std::filesystem::path& path, const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
            write_tensor(path, tensor_from_array(a));
        },
        py::arg("path"), py::arg("array"));
    m.def(
        "read_tensor", [](const std::filesystem::path& path) { return array_from_tensor(read_tensor<double>(path)); },
        py::arg("path"));
    m.def(
        "write_labels",
        [](const std::filesystem::path& path, const py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>& a) {
            if (a.ndim() != 1) throw InputError("labels must be one-dimensional");
            std::vector<std::uint32_t> labels(a.data(), a.data() + a.size());
            write_labels(path, labels);
        },
        py::arg("path"), py::arg("labels"));
    m.def(
        "read_labels",
        [](const std::filesystem::path& path) {
            std::vector<std::uint32_t> labels = read_labels(path);
            py::array_t<std::uint32_t> a(static_cast<py::ssize_t>(labels.size()));
            std::memcpy(a.mutable_data(), labels.data(), sizeof(std::uint32_t) * labels.size());
            return a;
        },
        py::arg("path"));

    m.def(
        "calibrate",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& conf,
           const py::array_t<bool, py::array::c_style | py::array::forcecast>& correct, std::size_t bins) {
            std::vector<double> c(conf.data(), conf.data() + conf.size());
            std::vector<std::uint8_t> k(correct.size());
            for (py::ssize_t i = 0; i < correct.size(); ++i) k[static_cast<std::size_t>(i)] = correct.data()[i] ? 1 : 0;
            CalibrationRecord rec = calibrate<double>(c, k, bins);
            py::list out;
            for (const CalibrationBin& b : rec.bins) {
                py::dict d;
                d["lo"] = b.lo;
                d["hi"] = b.hi;
                d["count"] = b.count;
                d["mean_conf"] = b.mean_conf;
                d["accuracy"] = b.accuracy;
                out.append(d);
            }
            py::dict rd;
            rd["bins"] = out;
            rd["ece"] = rec.ece;
            rd["n"] = rec.n;
            return rd;
        },
        py::arg("confidences"), py::arg("correct"), py::arg("bins") = 10,
        "Equal-width confidence bins over (0,1] and the expected calibration error.");

    py::class_<PyModel>(m, "Model")
        .def_static(
            "load", [](const std::filesystem::path& dir) { return PyModel{load_checkpoint<double>(dir).model}; },
            py::arg("checkpoint_dir"), "Load the model from a checkpoint directory (f64 checkpoints only).")
        .def_property_readonly("input_shape",
                               [](const PyModel& pm) {
                                   return std::vector<std::size_t>(pm.model.input_shape.begin(),
                                                                   pm.model.input_shape.end());
                               })
        .def_property_readonly("classes", [](const PyModel& pm) { return pm.model.class_count; })
        .def(
            "forward",
            [](const PyModel& pm,
               const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
                return array_from_tensor(forward(pm.model, tensor_from_array(x)));
            },
            py::arg("x"), "Dense logits for a batch shaped [N, ...input_shape].")
        .def(
            "predict",
            [](const PyModel& pm, const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
               const std::string& defense, std::size_t n_passes, std::uint64_t seed) {
                auto policy = make_policy<double>(defense_from_json_text(defense));
                RngStream rs(seed);
                Tensor<double> probs = averaged_forward(pm.model, tensor_from_array(x), *policy, n_passes, rs);
                Prediction<double> pred = predict(probs);
                py::array_t<std::uint32_t> labels(static_cast<py::ssize_t>(pred.labels.size()));
                std::memcpy(labels.mutable_data(), pred.labels.data(), sizeof(std::uint32_t) * pred.labels.size());
                py::array_t<double> conf(static_cast<py::ssize_t>(pred.confidences.size()));
                std::memcpy(conf.mutable_data(), pred.confidences.data(), sizeof(double) * pred.confidences.size());
                return py::make_tuple(labels, conf);
            },
            py::arg("x"), py::arg("defense") = std::string(), py::arg("n_passes") = 10, py::arg("seed") = 0,
            "Averaged defended prediction; returns (labels, confidences). Empty defense means dense.")
        .def(
            "craft",
            [](const PyModel& pm, const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
               const py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>& labels,
               const std::string& attack, const std::string& defense, std::uint64_t seed) {
                if (labels.ndim() != 1) throw InputError("labels must be one-dimensional");
                Tensor<double> batch = tensor_from_array(x);
                if (batch.shape().empty() || batch.shape()[0] != static_cast<std::size_t>(labels.size()))
                    throw InputError("craft: one label per example required");
                AttackSpec spec = attack_from_json_text(attack);
                auto policy = make_policy<double>(defense_from_json_text(defense));
                const std::size_t n = batch.shape()[0];
                const Shape per_example(batch.shape().begin() + 1, batch.shape().end());
                const std::size_t stride = shape_numel(per_example);
                Tensor<double> out(batch.shape());
                auto dst = out.data();
                RngStream root(seed);
                for (std::size_t i = 0; i < n; ++i) {
                    RngStream attack_rs = root.fork(i).fork(0, rng_tag::attack);
                    const std::size_t idx[1] = {i};
                    Tensor<double> xi = detail::gather_rows(batch, per_example, idx);
                    const std::uint32_t label = label_checked(labels.data()[i], pm.model.class_count);
                    Tensor<double> adv = craft_attack<double>(pm.model, policy.get(), spec, xi,
                                                              std::span<const std::uint32_t>(&label, 1), {}, attack_rs);
                    auto src = adv.data();
                    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * stride));
                }
                return array_from_tensor(out);
            },
            py::arg("x"), py::arg("labels"), py::arg("attack"), py::arg("defense") = std::string(),
            py::arg("seed") = 0,
            "Per-example adversarial batch. attack/defense are JSON fragments, e.g.\n"
            "attack='{\"kind\": \"fgsm\", \"lambda\": 4}', defense='{\"name\": \"sap\"}'.");

    m.def(
        "run_train",
        [](const std::string& config, const std::filesystem::path& out) {
            run_train(config_from_json_text(config), out);
        },
        py::arg("config"), py::arg("out"), "Train per the config (JSON text); writes checkpoint/ and history.csv.");
    m.def(
        "run_eval",
        [](const std::string& config, const std::filesystem::path& model_dir, const std::filesystem::path& out,
           unsigned threads) { run_eval(config_from_json_text(config), model_dir, out, threads); },
        py::arg("config"), py::arg("model_dir"), py::arg("out"), py::arg("threads") = 0,
        "Sweep the config's attack grid against a checkpoint; writes sweep.csv and calib/.");
    m.def(
        "run_attack_export",
        [](const std::string& config, const std::filesystem::path& model_dir, const std::filesystem::path& out) {
            run_attack_export(config_from_json_text(config), model_dir, out);
        },
        py::arg("config"), py::arg("model_dir"), py::arg("out"));
    m.def(
        "run_dataset_synth",
        [](const std::string& config, const std::filesystem::path& out) {
            run_dataset_synth(config_from_json_text(config), out);
        },
        py::arg("config"), py::arg("out"));
    m.def(
        "run_verify",
        [](const std::filesystem::path& model_dir, const std::string& config) {
            if (config.empty()) return run_verify(nullptr, model_dir);
            ExperimentConfig cfg = config_from_json_text(config);
            return run_verify(&cfg, model_dir);
        },
        py::arg("model_dir"), py::arg("config") = std::string(),
        "Invariant suite against a checkpoint; returns one line per passed check.");
}
