#include "sapbench/config.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace sap {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); }

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : obj.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || key == a;
        if (!known) fail(path, "unknown key '" + key + "'");
    }
}

const json* find(const json& obj, const char* key) {
    auto it = obj.find(key);
    return it == obj.end() || it->is_null() ? nullptr : &*it;
}

const json& member(const json& obj, const std::string& path, const char* key) {
    const json* j = find(obj, key);
    if (!j) fail(path, std::string("missing required key '") + key + "'");
    return *j;
}

void expect_object(const json& j, const std::string& path) {
    if (!j.is_object()) fail(path, "expected an object");
}

double as_real(const json& j, const std::string& path) {
    if (!j.is_number()) fail(path, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(path, "must be finite");
    return v;
}

std::size_t as_count(const json& j, const std::string& path) {
    if (j.is_number_unsigned()) return j.get<std::size_t>();
    if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::size_t>(j.get<std::int64_t>());
    fail(path, "expected a non-negative integer");
}

std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) fail(path, "expected a string");
    return j.get<std::string>();
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) fail(path, "expected true or false");
    return j.get<bool>();
}

const json& as_array(const json& j, const std::string& path) {
    if (!j.is_array()) fail(path, "expected an array");
    return j;
}

std::string idx(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

LayerSpec parse_layer(const json& j, const std::string& path) {
    expect_object(j, path);
    const std::string kind = as_string(member(j, path, "kind"), path + ".kind");
    if (kind == "linear") {
        check_keys(j, path, {"kind", "in", "out"});
        return LayerSpec::linear(as_count(member(j, path, "in"), path + ".in"),
                                 as_count(member(j, path, "out"), path + ".out"));
    }
    if (kind == "conv2d") {
        check_keys(j, path, {"kind", "in", "out", "kernel", "stride", "padding"});
        const json* stride = find(j, "stride");
        const json* padding = find(j, "padding");
        return LayerSpec::conv2d(as_count(member(j, path, "in"), path + ".in"),
                                 as_count(member(j, path, "out"), path + ".out"),
                                 as_count(member(j, path, "kernel"), path + ".kernel"),
                                 stride ? as_count(*stride, path + ".stride") : 1,
                                 padding ? as_count(*padding, path + ".padding") : 0);
    }
    if (kind == "relu") {
        check_keys(j, path, {"kind"});
        return LayerSpec::relu();
    }
    if (kind == "flatten") {
        check_keys(j, path, {"kind"});
        return LayerSpec::flatten();
    }
    if (kind == "avgpool2d") {
        check_keys(j, path, {"kind", "window", "stride"});
        const std::size_t window = as_count(member(j, path, "window"), path + ".window");
        const json* stride = find(j, "stride");
        return LayerSpec::avgpool2d(window, stride ? as_count(*stride, path + ".stride") : window);
    }
    fail(path + ".kind", "unknown layer kind '" + kind + "'");
}

ModelSection parse_model(const json& j, const std::string& path) {
    expect_object(j, path);
    check_keys(j, path, {"preset", "layers", "input", "classes", "input_scale", "hooks"});
    ModelSection s;
    if (const json* p = find(j, "preset")) {
        s.preset = as_string(*p, path + ".preset");
        if (s.preset != "mlp" && s.preset != "cnn") fail(path + ".preset", "unknown preset '" + s.preset + "'");
        if (find(j, "layers")) fail(path, "give either 'preset' or 'layers', not both");
    } else {
        const json& layers = as_array(member(j, path, "layers"), path + ".layers");
        if (layers.empty()) fail(path + ".layers", "must not be empty");
        for (std::size_t i = 0; i < layers.size(); ++i) s.layers.push_back(parse_layer(layers[i], idx(path + ".layers", i)));
    }
    if (const json* in = find(j, "input")) {
        const json& arr = as_array(*in, path + ".input");
        Shape shape;
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::size_t d = as_count(arr[i], idx(path + ".input", i));
            if (d == 0) fail(idx(path + ".input", i), "dimensions must be positive");
            shape.push_back(d);
        }
        if (shape.size() != 3) fail(path + ".input", "expected [channels, height, width]");
        s.input_shape = shape;
    }
    if (const json* c = find(j, "classes")) {
        s.class_count = as_count(*c, path + ".classes");
        if (s.class_count < 2) fail(path + ".classes", "need at least two classes");
    }
    if (const json* sc = find(j, "input_scale")) {
        const double v = as_real(*sc, path + ".input_scale");
        if (!(v > 0.0)) fail(path + ".input_scale", "must be positive");
        s.input_scale = v;
    }
    if (const json* h = find(j, "hooks")) {
        const json& arr = as_array(*h, path + ".hooks");
        std::vector<std::size_t> hooks;
        for (std::size_t i = 0; i < arr.size(); ++i) hooks.push_back(as_count(arr[i], idx(path + ".hooks", i)));
        s.hooks = std::move(hooks);
    }
    return s;
}

DataSection parse_data(const json& j, const std::string& path) {
    expect_object(j, path);
    check_keys(j, path, {"path", "synth"});
    DataSection s;
    const json* p = find(j, "path");
    const json* sy = find(j, "synth");
    if (!!p == !!sy) fail(path, "give exactly one of 'path' or 'synth'");
    if (p) {
        s.path = as_string(*p, path + ".path");
        if (s.path.empty()) fail(path + ".path", "must not be empty");
        if (!std::filesystem::exists(s.path)) fail(path + ".path", "dataset directory '" + s.path + "' does not exist");
    } else {
        expect_object(*sy, path + ".synth");
        check_keys(*sy, path + ".synth", {"n_per_class", "classes", "image_size", "noise_std", "seed"});
        SynthSpec sp;
        if (const json* v = find(*sy, "n_per_class")) sp.n_per_class = as_count(*v, path + ".synth.n_per_class");
        if (const json* v = find(*sy, "classes")) sp.classes = as_count(*v, path + ".synth.classes");
        if (const json* v = find(*sy, "image_size")) sp.image_size = as_count(*v, path + ".synth.image_size");
        if (const json* v = find(*sy, "noise_std")) sp.noise_std = as_real(*v, path + ".synth.noise_std");
        if (const json* v = find(*sy, "seed")) sp.seed = as_count(*v, path + ".synth.seed");
        if (sp.n_per_class == 0) fail(path + ".synth.n_per_class", "must be positive");
        if (sp.classes < 2) fail(path + ".synth.classes", "need at least two classes");
        if (sp.image_size == 0) fail(path + ".synth.image_size", "must be positive");
        if (sp.noise_std < 0.0) fail(path + ".synth.noise_std", "must be non-negative");
        s.synth = sp;
    }
    return s;
}

TrainConfig parse_train(const json& j, const std::string& path) {
    expect_object(j, path);
    check_keys(j, path, {"epochs", "batch_size", "lr", "lr_schedule", "momentum", "weight_decay", "dropout_rate", "adv"});
    TrainConfig cfg;
    if (const json* v = find(j, "epochs")) cfg.epochs = as_count(*v, path + ".epochs");
    if (const json* v = find(j, "batch_size")) cfg.batch_size = as_count(*v, path + ".batch_size");
    const json* lr = find(j, "lr");
    const json* sched = find(j, "lr_schedule");
    if (lr && sched) fail(path, "give either 'lr' or 'lr_schedule', not both");
    if (lr) cfg.lr_schedule = {{1, as_real(*lr, path + ".lr")}};
    if (sched) {
        cfg.lr_schedule.clear();
        const json& arr = as_array(*sched, path + ".lr_schedule");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::string p = idx(path + ".lr_schedule", i);
            expect_object(arr[i], p);
            check_keys(arr[i], p, {"epoch", "lr"});
            cfg.lr_schedule.push_back({as_count(member(arr[i], p, "epoch"), p + ".epoch"),
                                       as_real(member(arr[i], p, "lr"), p + ".lr")});
        }
    }
    if (const json* v = find(j, "momentum")) cfg.momentum = as_real(*v, path + ".momentum");
    if (const json* v = find(j, "weight_decay")) cfg.weight_decay = as_real(*v, path + ".weight_decay");
    if (const json* v = find(j, "dropout_rate")) cfg.dropout_rate = as_real(*v, path + ".dropout_rate");
    if (const json* v = find(j, "adv")) {
        const std::string p = path + ".adv";
        expect_object(*v, p);
        check_keys(*v, p, {"mix", "lambda", "kind", "step"});
        AdvTrainConfig adv;
        if (const json* m = find(*v, "mix")) adv.mix_fraction = as_real(*m, p + ".mix");
        if (const json* l = find(*v, "lambda")) adv.lambda_train = as_real(*l, p + ".lambda");
        if (const json* k = find(*v, "kind")) {
            try {
                adv.kind = attack_kind_from_name(as_string(*k, p + ".kind"));
            } catch (const InputError& e) {
                fail(p + ".kind", e.what());
            }
            if (adv.kind == AttackKind::None) fail(p + ".kind", "adversarial training needs a real attack");
        }
        if (const json* st = find(*v, "step")) adv.step = as_real(*st, p + ".step");
        cfg.adv = adv;
    }
    cfg.validate();  // throws ConfigError with the section prefix
    return cfg;
}

PolicyConfig parse_defense(const json& j, const std::string& path) {
    expect_object(j, path);
    const std::string name = as_string(member(j, path, "name"), path + ".name");
    try {
        if (name == "dense" || name == "none") {
            check_keys(j, path, {"name"});
            return NoDefenseConfig{};
        }
        if (name == "sap") {
            check_keys(j, path, {"name", "sample_fraction", "per_hook_fraction"});
            SapConfig cfg;
            if (const json* v = find(j, "sample_fraction")) cfg.sample_fraction = as_real(*v, path + ".sample_fraction");
            if (const json* v = find(j, "per_hook_fraction")) {
                expect_object(*v, path + ".per_hook_fraction");
                for (const auto& [key, val] : v->items()) {
                    std::size_t hook = 0;
                    try {
                        hook = std::stoul(key);
                    } catch (const std::exception&) {
                        fail(path + ".per_hook_fraction", "keys must be hook positions, got '" + key + "'");
                    }
                    cfg.per_hook_fraction[hook] = as_real(val, path + ".per_hook_fraction." + key);
                }
            }
            if (!(cfg.sample_fraction > 0.0)) fail(path + ".sample_fraction", "must be positive");
            return cfg;
        }
        if (name == "dropout") {
            check_keys(j, path, {"name", "rate"});
            DropoutConfig cfg;
            if (const json* v = find(j, "rate")) cfg.rate = as_real(*v, path + ".rate");
            if (cfg.rate < 0.0 || cfg.rate >= 1.0) fail(path + ".rate", "must be in [0, 1)");
            return cfg;
        }
        if (name == "rnw" || name == "rsw" || name == "rna" || name == "rsa") {
            check_keys(j, path, {"name", "stddev"});
            NoiseConfig cfg;
            cfg.kind = name == "rnw"   ? NoiseKind::RNW
                       : name == "rsw" ? NoiseKind::RSW
                       : name == "rna" ? NoiseKind::RNA
                                       : NoiseKind::RSA;
            if (const json* v = find(j, "stddev")) cfg.stddev = as_real(*v, path + ".stddev");
            if (cfg.stddev < 0.0) fail(path + ".stddev", "must be non-negative");
            return cfg;
        }
        if (name == "dwp" || name == "swp") {
            check_keys(j, path, {"name", "keep_percent"});
            PruneConfig cfg;
            cfg.kind = name == "dwp" ? PruneKind::DWP : PruneKind::SWP;
            if (const json* v = find(j, "keep_percent")) cfg.keep_percent = as_real(*v, path + ".keep_percent");
            if (!(cfg.keep_percent > 0.0) || cfg.keep_percent > 100.0) fail(path + ".keep_percent", "must be in (0, 100]");
            return cfg;
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        fail(path, e.what());
    }
    fail(path + ".name", "unknown defense '" + name + "'");
}

AttackSpec parse_attack(const json& j, const std::string& path) {
    expect_object(j, path);
    check_keys(j, path,
               {"kind", "lambda", "step", "mc_samples", "mc_per_step", "defended_source", "integer_pixels",
                "sign_then_average"});
    AttackSpec spec;
    try {
        spec.kind = attack_kind_from_name(as_string(member(j, path, "kind"), path + ".kind"));
    } catch (const InputError& e) {
        fail(path + ".kind", e.what());
    }
    if (const json* v = find(j, "lambda")) spec.lambda = as_real(*v, path + ".lambda");
    if (const json* v = find(j, "step")) spec.step = as_real(*v, path + ".step");
    if (const json* v = find(j, "mc_samples")) spec.mc_samples = as_count(*v, path + ".mc_samples");
    if (const json* v = find(j, "mc_per_step")) spec.mc_per_step = as_count(*v, path + ".mc_per_step");
    if (const json* v = find(j, "defended_source")) spec.gradient_from_defended = as_bool(*v, path + ".defended_source");
    if (const json* v = find(j, "integer_pixels")) spec.integer_pixels = as_bool(*v, path + ".integer_pixels");
    if (const json* v = find(j, "sign_then_average")) spec.sign_then_average = as_bool(*v, path + ".sign_then_average");
    try {
        spec.validate();
    } catch (const Error& e) {
        fail(path, e.what());
    }
    return spec;
}

EvalSection parse_eval(const json& j, const std::string& path) {
    expect_object(j, path);
    check_keys(j, path, {"lambdas", "n_passes", "mc_samples", "calibration_bins", "calibration"});
    EvalSection s;
    if (const json* v = find(j, "lambdas")) {
        const json& arr = as_array(*v, path + ".lambdas");
        s.lambdas.clear();
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const double l = as_real(arr[i], idx(path + ".lambdas", i));
            if (l < 0.0) fail(idx(path + ".lambdas", i), "must be non-negative");
            for (double prev : s.lambdas)
                if (prev == l) fail(idx(path + ".lambdas", i), "duplicate value");
            s.lambdas.push_back(l);
        }
        if (s.lambdas.empty()) fail(path + ".lambdas", "must not be empty");
    }
    if (const json* v = find(j, "n_passes")) {
        s.n_passes = as_count(*v, path + ".n_passes");
        if (s.n_passes == 0) fail(path + ".n_passes", "must be positive");
    }
    if (const json* v = find(j, "mc_samples")) {
        const json& arr = as_array(*v, path + ".mc_samples");
        s.mc_samples.clear();
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::size_t m = as_count(arr[i], idx(path + ".mc_samples", i));
            if (m == 0) fail(idx(path + ".mc_samples", i), "must be positive");
            for (std::size_t prev : s.mc_samples)
                if (prev == m) fail(idx(path + ".mc_samples", i), "duplicate value");
            s.mc_samples.push_back(m);
        }
        if (s.mc_samples.empty()) fail(path + ".mc_samples", "must not be empty");
    }
    if (const json* v = find(j, "calibration_bins")) {
        s.calibration_bins = as_count(*v, path + ".calibration_bins");
        if (s.calibration_bins == 0) fail(path + ".calibration_bins", "must be positive");
    }
    if (const json* v = find(j, "calibration")) s.calibration = as_bool(*v, path + ".calibration");
    return s;
}

}  // namespace

ExperimentConfig parse_experiment_config(const nlohmann::json& doc) {
    expect_object(doc, "config");
    check_keys(doc, "config",
               {"model", "data", "train", "defense", "attack", "eval", "seed", "output_dir", "precision"});
    ExperimentConfig cfg;
    cfg.raw = doc;
    if (const json* v = find(doc, "model")) cfg.model = parse_model(*v, "model");
    if (const json* v = find(doc, "data")) cfg.data = parse_data(*v, "data");
    if (const json* v = find(doc, "train")) cfg.train = parse_train(*v, "train");
    if (const json* v = find(doc, "defense")) cfg.defense = parse_defense(*v, "defense");
    if (const json* v = find(doc, "attack")) {
        const json& arr = as_array(*v, "attack");
        for (std::size_t i = 0; i < arr.size(); ++i) cfg.attacks.push_back(parse_attack(arr[i], idx("attack", i)));
    }
    if (const json* v = find(doc, "eval")) cfg.eval = parse_eval(*v, "eval");
    if (const json* v = find(doc, "seed")) cfg.seed = as_count(*v, "seed");
    if (const json* v = find(doc, "output_dir")) cfg.output_dir = as_string(*v, "output_dir");
    if (const json* v = find(doc, "precision")) {
        cfg.precision = as_string(*v, "precision");
        if (cfg.precision != "f64" && cfg.precision != "f32") fail("precision", "expected 'f64' or 'f32'");
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_experiment_config(doc);
}

}  // namespace sap
