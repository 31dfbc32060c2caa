#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "sapbench/dataio.hpp"
#include "sapbench/errors.hpp"
#include "sapbench/model.hpp"
#include "sapbench/textio.hpp"

namespace sap {

// A checkpoint directory holds manifest.json plus one SAPT file per parameter
// (and per velocity buffer when mid-training state is kept). Reloading and
// continuing with the same seed reproduces the original run bit-for-bit in
// 64-bit mode: all training randomness is derived from (seed, epoch), so the
// stored seed and epoch count *are* the RNG state.
template <typename T>
struct Checkpoint {
    ModelGraph<T> model;
    ParamMap<T> velocity;  // empty when no optimizer state was kept
    std::uint64_t seed = 0;
    std::size_t epoch = 0;  // completed epochs
    double loss = 0.0;      // last training epoch
    double accuracy = 0.0;
};

namespace detail {

inline nlohmann::json layer_to_json(const LayerSpec& l) {
    nlohmann::json j;
    j["kind"] = layer_kind_name(l.kind);
    switch (l.kind) {
        case LayerKind::Linear:
            j["in"] = l.in;
            j["out"] = l.out;
            break;
        case LayerKind::Conv2d:
            j["in"] = l.in;
            j["out"] = l.out;
            j["kernel"] = l.kernel;
            j["stride"] = l.stride;
            j["padding"] = l.padding;
            break;
        case LayerKind::AvgPool2d:
            j["window"] = l.kernel;
            j["stride"] = l.stride;
            break;
        case LayerKind::Relu:
        case LayerKind::Flatten: break;
    }
    return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
    const LayerKind kind = layer_kind_from_name(j.at("kind").get<std::string>());
    switch (kind) {
        case LayerKind::Linear: return LayerSpec::linear(j.at("in").get<std::size_t>(), j.at("out").get<std::size_t>());
        case LayerKind::Conv2d:
            return LayerSpec::conv2d(j.at("in").get<std::size_t>(), j.at("out").get<std::size_t>(),
                                     j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>(),
                                     j.at("padding").get<std::size_t>());
        case LayerKind::Relu: return LayerSpec::relu();
        case LayerKind::Flatten: return LayerSpec::flatten();
        case LayerKind::AvgPool2d:
            return LayerSpec::avgpool2d(j.at("window").get<std::size_t>(), j.at("stride").get<std::size_t>());
    }
    throw InternalError("layer_from_json: unknown kind");
}

template <typename T>
const char* precision_name() {
    return std::is_same_v<T, double> ? "f64" : "f32";
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& ckpt) {
    validate_model(ckpt.model);
    std::filesystem::create_directories(dir / "params");

    nlohmann::json m;
    m["format"] = "sapbench-checkpoint";
    m["version"] = 1;
    m["precision"] = detail::precision_name<T>();
    m["seed"] = ckpt.seed;
    m["epoch"] = ckpt.epoch;
    m["loss"] = ckpt.loss;
    m["accuracy"] = ckpt.accuracy;

    nlohmann::json model;
    model["input_shape"] = ckpt.model.input_shape;
    model["class_count"] = ckpt.model.class_count;
    model["input_scale"] = static_cast<double>(ckpt.model.input_scale);
    model["hooks"] = ckpt.model.hooks;
    model["layers"] = nlohmann::json::array();
    for (const LayerSpec& l : ckpt.model.layers) model["layers"].push_back(detail::layer_to_json(l));
    m["model"] = model;

    nlohmann::json params = nlohmann::json::array();
    for (const auto& [name, tensor] : ckpt.model.params) {
        params.push_back({{"name", name}, {"shape", tensor.shape()}});
        write_tensor(dir / "params" / (name + ".sapt"), tensor);
    }
    m["params"] = params;

    m["has_velocity"] = !ckpt.velocity.empty();
    if (!ckpt.velocity.empty()) {
        std::filesystem::create_directories(dir / "velocity");
        for (const auto& [name, tensor] : ckpt.velocity)
            write_tensor(dir / "velocity" / (name + ".sapt"), tensor);
    }

    write_text_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(read_text_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    try {
        if (m.at("format").get<std::string>() != "sapbench-checkpoint")
            throw FormatError(manifest_path.string() + ": not a checkpoint manifest");
        if (m.at("version").get<int>() != 1)
            throw FormatError(manifest_path.string() + ": unsupported checkpoint version");
        if (m.at("precision").get<std::string>() != detail::precision_name<T>())
            throw ConfigError("checkpoint precision " + m.at("precision").get<std::string>() +
                              " does not match the requested " + detail::precision_name<T>());

        Checkpoint<T> ckpt;
        ckpt.seed = m.at("seed").get<std::uint64_t>();
        ckpt.epoch = m.at("epoch").get<std::size_t>();
        ckpt.loss = m.value("loss", 0.0);
        ckpt.accuracy = m.value("accuracy", 0.0);

        const nlohmann::json& model = m.at("model");
        ckpt.model.input_shape = model.at("input_shape").get<Shape>();
        ckpt.model.class_count = model.at("class_count").get<std::size_t>();
        ckpt.model.input_scale = static_cast<T>(model.at("input_scale").get<double>());
        ckpt.model.hooks = model.at("hooks").get<std::vector<std::size_t>>();
        for (const auto& lj : model.at("layers")) ckpt.model.layers.push_back(detail::layer_from_json(lj));

        for (const auto& pj : m.at("params")) {
            const auto name = pj.at("name").get<std::string>();
            Tensor<T> t = read_tensor<T>(dir / "params" / (name + ".sapt"));
            if (t.shape() != pj.at("shape").get<Shape>())
                throw FormatError("checkpoint parameter " + name + " has shape " + shape_str(t.shape()) +
                                  ", manifest says " + shape_str(pj.at("shape").get<Shape>()));
            ckpt.model.params.emplace(name, std::move(t));
        }
        if (m.value("has_velocity", false))
            for (const auto& pj : m.at("params")) {
                const auto name = pj.at("name").get<std::string>();
                ckpt.velocity.emplace(name, read_tensor<T>(dir / "velocity" / (name + ".sapt")));
            }

        validate_model(ckpt.model);
        return ckpt;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
}

}  // namespace sap
