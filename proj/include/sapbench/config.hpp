#pragma once

// One JSON document drives a whole run: model, data, training recipe, the
// defense under test, the attack grid, and evaluation settings. Parsing is
// strict - unknown keys and type mismatches are reported with the full
// section path before any computation starts.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sapbench/attack.hpp"
#include "sapbench/dataio.hpp"
#include "sapbench/defense.hpp"
#include "sapbench/errors.hpp"
#include "sapbench/model.hpp"
#include "sapbench/rng.hpp"
#include "sapbench/trainer.hpp"

namespace sap {

struct ModelSection {
    std::string preset;             // "mlp" | "cnn"; empty when layers are explicit
    std::vector<LayerSpec> layers;  // used when preset is empty
    std::optional<Shape> input_shape;
    std::size_t class_count = 10;
    std::optional<double> input_scale;
    std::optional<std::vector<std::size_t>> hooks;  // default: every relu
};

struct SynthSpec {
    std::size_t n_per_class = 100;
    std::size_t classes = 10;
    std::size_t image_size = 16;
    double noise_std = 16.0;
    std::optional<std::uint64_t> seed;  // default: derived from the run seed
};

struct DataSection {
    std::string path;  // dataset directory; mutually exclusive with synth
    std::optional<SynthSpec> synth;
};

struct EvalSection {
    std::vector<double> lambdas{0, 1, 2, 4, 8, 16, 32, 64};
    std::size_t n_passes = 10;
    std::vector<std::size_t> mc_samples{100};  // adversary budget grid for defended-source attacks
    std::size_t calibration_bins = 10;
    bool calibration = true;
};

struct ExperimentConfig {
    std::optional<ModelSection> model;
    std::optional<DataSection> data;
    std::optional<TrainConfig> train;
    PolicyConfig defense = NoDefenseConfig{};
    std::vector<AttackSpec> attacks;
    EvalSection eval;
    std::uint64_t seed = 0;
    std::string output_dir;
    std::string precision = "f64";  // "f64" | "f32"
    nlohmann::json raw;             // parsed document, snapshotted into run manifests
};

// Throws ConfigError naming the offending section path.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Demands a section a command cannot run without.
template <typename S>
const S& require_section(const std::optional<S>& section, const char* name) {
    if (!section) throw ConfigError(std::string(name) + ": section is required by this command");
    return *section;
}

template <typename T>
ModelGraph<T> build_model(const ModelSection& s) {
    ModelGraph<T> model;
    if (s.preset == "mlp") {
        model = make_mlp_preset<T>(s.class_count);
        if (s.input_shape && *s.input_shape != model.input_shape)
            throw ConfigError("model.input: the mlp preset is fixed to " + shape_str(model.input_shape));
    } else if (s.preset == "cnn") {
        try {
            model = make_cnn_preset<T>(s.input_shape.value_or(Shape{1, 16, 16}), s.class_count);
        } catch (const InputError& e) {
            throw ConfigError(std::string("model.input: ") + e.what());
        }
    } else {
        if (!s.input_shape) throw ConfigError("model.input: required when layers are explicit");
        model.input_shape = *s.input_shape;
        model.class_count = s.class_count;
        model.input_scale = static_cast<T>(1.0 / 255.0);
        model.layers = s.layers;
        for (std::size_t i = 0; i < model.layers.size(); ++i) add_layer_params(model, i);
        hook_all_relus(model);
    }
    if (s.input_scale) model.input_scale = static_cast<T>(*s.input_scale);
    if (s.hooks) model.hooks = *s.hooks;
    try {
        validate_model(model);
    } catch (const Error& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    return model;
}

// Loads the referenced dataset or synthesizes one. A synth section without its
// own seed derives one from the run seed, so (config, seed) pins the data.
template <typename T>
Dataset<T> resolve_dataset(const DataSection& s, std::uint64_t run_seed) {
    if (!s.path.empty()) return load_dataset<T>(s.path);
    const SynthSpec& sp = *s.synth;
    const std::uint64_t seed = sp.seed ? *sp.seed : RngStream(run_seed).fork(0, rng_tag::synth).key();
    return synth_dataset<T>(sp.n_per_class, sp.classes, sp.image_size, sp.noise_std, seed);
}

}  // namespace sap
