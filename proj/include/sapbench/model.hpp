#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sapbench/defense.hpp"
#include "sapbench/ops.hpp"
#include "sapbench/rng.hpp"
#include "sapbench/tensor.hpp"

namespace sap {

enum class LayerKind { Linear, Conv2d, Relu, Flatten, AvgPool2d };

inline std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Linear: return "linear";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Relu: return "relu";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::AvgPool2d: return "avgpool2d";
    }
    throw InternalError("layer_kind_name: unknown kind");
}

inline LayerKind layer_kind_from_name(const std::string& name) {
    if (name == "linear") return LayerKind::Linear;
    if (name == "conv2d") return LayerKind::Conv2d;
    if (name == "relu") return LayerKind::Relu;
    if (name == "flatten") return LayerKind::Flatten;
    if (name == "avgpool2d") return LayerKind::AvgPool2d;
    throw InputError("unknown layer kind '" + name + "'");
}

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    // linear: in/out features. conv2d: in/out channels plus kernel geometry.
    // avgpool2d: kernel window and stride.
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    static LayerSpec linear(std::size_t in, std::size_t out) {
        return LayerSpec{LayerKind::Linear, in, out, 0, 1, 0};
    }
    static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                            std::size_t padding = 0) {
        return LayerSpec{LayerKind::Conv2d, in, out, kernel, stride, padding};
    }
    static LayerSpec relu() { return LayerSpec{LayerKind::Relu, 0, 0, 0, 1, 0}; }
    static LayerSpec flatten() { return LayerSpec{LayerKind::Flatten, 0, 0, 0, 1, 0}; }
    static LayerSpec avgpool2d(std::size_t window, std::size_t stride) {
        return LayerSpec{LayerKind::AvgPool2d, 0, 0, window, stride, 0};
    }
};

// Per-example output shape of one layer. Throws when shapes do not compose.
inline Shape layer_output_shape(const LayerSpec& layer, const Shape& in) {
    switch (layer.kind) {
        case LayerKind::Linear:
            if (in.size() != 1 || in[0] != layer.in)
                throw DimensionError("linear layer expects " + std::to_string(layer.in) + " features, got " +
                                     shape_str(in));
            return Shape{layer.out};
        case LayerKind::Conv2d: {
            if (in.size() != 3 || in[0] != layer.in)
                throw DimensionError("conv2d layer expects [" + std::to_string(layer.in) + ",H,W], got " +
                                     shape_str(in));
            const std::size_t h = in[1], w = in[2];
            if (h + 2 * layer.padding < layer.kernel || w + 2 * layer.padding < layer.kernel)
                throw DimensionError("conv2d kernel does not fit input " + shape_str(in));
            return Shape{layer.out, (h + 2 * layer.padding - layer.kernel) / layer.stride + 1,
                         (w + 2 * layer.padding - layer.kernel) / layer.stride + 1};
        }
        case LayerKind::Relu: return in;
        case LayerKind::Flatten: {
            std::size_t n = 1;
            for (std::size_t d : in) n *= d;
            return Shape{n};
        }
        case LayerKind::AvgPool2d: {
            if (in.size() != 3) throw DimensionError("avgpool2d expects [C,H,W], got " + shape_str(in));
            if (in[1] < layer.kernel || in[2] < layer.kernel)
                throw DimensionError("avgpool2d window does not fit input " + shape_str(in));
            return Shape{in[0], (in[1] - layer.kernel) / layer.stride + 1, (in[2] - layer.kernel) / layer.stride + 1};
        }
    }
    throw InternalError("layer_output_shape: unknown kind");
}

// Activation-transform callback: (hooked activation, hook ordinal, tape).
template <typename T>
using ActivationTransform = std::function<Tensor<T>(const Tensor<T>&, std::size_t, Tape<T>*)>;

template <typename T>
struct ModelGraph {
    std::vector<LayerSpec> layers;
    ParamMap<T> params;              // "w<i>" / "b<i>" by layer index
    std::vector<std::size_t> hooks;  // layer indices of hooked ReLU outputs
    Shape input_shape;               // per-example shape, e.g. {1,16,16}
    std::size_t class_count = 0;
    // Raw pixels enter in [0,255]; normalization happens here, inside the
    // model, so attacks and their budgets live in pixel units.
    T input_scale = T(1);
};

template <typename T>
void validate_model(const ModelGraph<T>& model) {
    if (model.layers.empty()) throw StateError("model: no layers");
    Shape running = model.input_shape;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& layer = model.layers[i];
        running = layer_output_shape(layer, running);
        if (layer.kind == LayerKind::Linear || layer.kind == LayerKind::Conv2d) {
            const std::string wname = "w" + std::to_string(i);
            const auto it = model.params.find(wname);
            if (it == model.params.end()) throw StateError("model: missing parameter " + wname);
            const Shape want = layer.kind == LayerKind::Linear
                                   ? Shape{layer.in, layer.out}
                                   : Shape{layer.out, layer.in, layer.kernel, layer.kernel};
            if (it->second.shape() != want)
                throw StateError("model: parameter " + wname + " has shape " + shape_str(it->second.shape()) +
                                 ", expected " + shape_str(want));
            const auto bit = model.params.find("b" + std::to_string(i));
            if (bit != model.params.end() && bit->second.shape() != Shape{layer.out})
                throw StateError("model: bias b" + std::to_string(i) + " has shape " +
                                 shape_str(bit->second.shape()));
        }
    }
    if (running != Shape{model.class_count})
        throw StateError("model: layers end in " + shape_str(running) + ", expected [" +
                         std::to_string(model.class_count) + "]");
    std::vector<std::size_t> hooks = model.hooks;
    std::sort(hooks.begin(), hooks.end());
    if (std::adjacent_find(hooks.begin(), hooks.end()) != hooks.end())
        throw StateError("model: duplicate hook index");
    for (std::size_t h : hooks) {
        if (h >= model.layers.size() || model.layers[h].kind != LayerKind::Relu)
            throw StateError("model: hook " + std::to_string(h) + " is not a relu layer");
    }
}

// One forward pass to logits. The transform, when given, replaces each hooked
// activation in order; params_override substitutes a transformed θ instance.
template <typename T>
Tensor<T> forward(const ModelGraph<T>& model, const Tensor<T>& x, const ActivationTransform<T>& transform = {},
                  Tape<T>* tape = nullptr, const ParamMap<T>* params_override = nullptr) {
    if (x.ndim() != model.input_shape.size() + 1)
        throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match model input " +
                             shape_str(model.input_shape));
    for (std::size_t d = 0; d < model.input_shape.size(); ++d)
        if (x.dim(d + 1) != model.input_shape[d])
            throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match model input " +
                                 shape_str(model.input_shape));
    const ParamMap<T>& params = params_override ? *params_override : model.params;
    auto param = [&](const std::string& pname) -> const Tensor<T>& {
        const auto it = params.find(pname);
        if (it == params.end()) throw StateError("forward: missing parameter " + pname);
        return it->second;
    };

    Tensor<T> h = model.input_scale == T(1) ? x : scale(x, model.input_scale, tape);
    std::size_t hook_ordinal = 0;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& layer = model.layers[i];
        switch (layer.kind) {
            case LayerKind::Linear:
                h = matmul(h, param("w" + std::to_string(i)), tape);
                if (params.count("b" + std::to_string(i))) h = bias_add(h, param("b" + std::to_string(i)), tape);
                break;
            case LayerKind::Conv2d:
                h = conv2d(h, param("w" + std::to_string(i)), layer.stride, layer.padding, tape);
                if (params.count("b" + std::to_string(i))) h = bias_add(h, param("b" + std::to_string(i)), tape);
                break;
            case LayerKind::Relu:
                h = relu(h, tape);
                if (std::find(model.hooks.begin(), model.hooks.end(), i) != model.hooks.end()) {
                    if (transform) h = transform(h, hook_ordinal, tape);
                    ++hook_ordinal;
                }
                break;
            case LayerKind::Flatten: h = flatten(h, tape); break;
            case LayerKind::AvgPool2d: h = avgpool2d(h, layer.kernel, layer.stride, tape); break;
        }
    }
    return h;
}

// Mean of per-pass softmax probabilities under fresh policy instances.
// Deterministic policies collapse to a single pass, so the average equals
// that pass bit-for-bit.
template <typename T>
Tensor<T> averaged_forward(const ModelGraph<T>& model, const Tensor<T>& x, const DefensePolicy<T>& policy,
                           std::size_t n_passes, RngStream& rs) {
    if (n_passes < 1) throw InputError("averaged_forward: n_passes must be at least 1");
    const std::size_t effective = policy.deterministic() ? 1 : n_passes;
    Tensor<T> acc;
    for (std::size_t pass = 0; pass < effective; ++pass) {
        RngStream pass_rs = rs.fork(pass, 0x70);
        Tensor<T> logits;
        if (policy.weight_family()) {
            const ParamMap<T> instance = policy.transform_params(model.params, pass_rs);
            logits = forward<T>(model, x, {}, nullptr, &instance);
        } else {
            ActivationTransform<T> transform = [&](const Tensor<T>& h, std::size_t hook, Tape<T>* tape) {
                return policy.transform_activation(h, hook, tape, pass_rs);
            };
            logits = forward<T>(model, x, transform);
        }
        Tensor<T> probs = softmax(logits);
        if (pass == 0) {
            acc = probs;
        } else {
            auto av = acc.data();
            auto pv = probs.data();
            for (std::size_t j = 0; j < av.size(); ++j) av[j] += pv[j];
        }
    }
    if (effective > 1) {
        const T inv = T(1) / static_cast<T>(effective);
        for (auto& v : acc.data()) v *= inv;
    }
    return acc;
}

template <typename T>
struct Prediction {
    std::vector<std::uint32_t> labels;
    std::vector<T> confidences;
};

// Argmax label and its probability per row; ties go to the lowest class.
template <typename T>
Prediction<T> predict(const Tensor<T>& probabilities) {
    if (probabilities.ndim() != 2)
        throw DimensionError("predict: expects [N,C] probabilities, got " + shape_str(probabilities.shape()));
    const std::size_t batch = probabilities.dim(0), classes = probabilities.dim(1);
    if (classes == 0) throw DimensionError("predict: zero classes");
    Prediction<T> out;
    out.labels.reserve(batch);
    out.confidences.reserve(batch);
    auto pv = probabilities.data();
    for (std::size_t nn = 0; nn < batch; ++nn) {
        const T* row = &pv[nn * classes];
        double total = 0.0;
        std::size_t best = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            total += static_cast<double>(row[c]);
            if (row[c] > row[best]) best = c;
        }
        if (std::abs(total - 1.0) > 1e-3)
            throw InputError("predict: row " + std::to_string(nn) + " sums to " + std::to_string(total) +
                             ", not a probability vector");
        out.labels.push_back(static_cast<std::uint32_t>(best));
        out.confidences.push_back(row[best]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Presets and initialization
// ---------------------------------------------------------------------------

// Kaiming-uniform fan-in init for relu networks; biases start at zero.
template <typename T>
void init_params(ModelGraph<T>& model, RngStream& rs) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& layer = model.layers[i];
        if (layer.kind != LayerKind::Linear && layer.kind != LayerKind::Conv2d) continue;
        const std::size_t fan_in =
            layer.kind == LayerKind::Linear ? layer.in : layer.in * layer.kernel * layer.kernel;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        RngStream wrs = rs.fork(i, 0x57);
        auto& w = model.params.at("w" + std::to_string(i));
        for (auto& v : w.data()) v = static_cast<T>((2.0 * wrs.uniform01() - 1.0) * bound);
        const auto bit = model.params.find("b" + std::to_string(i));
        if (bit != model.params.end())
            for (auto& v : bit->second.data()) v = T(0);
    }
}

template <typename T>
void add_layer_params(ModelGraph<T>& model, std::size_t i) {
    const LayerSpec& layer = model.layers[i];
    if (layer.kind == LayerKind::Linear) {
        model.params.emplace("w" + std::to_string(i), Tensor<T>(Shape{layer.in, layer.out}));
        model.params.emplace("b" + std::to_string(i), Tensor<T>(Shape{layer.out}));
    } else if (layer.kind == LayerKind::Conv2d) {
        model.params.emplace("w" + std::to_string(i), Tensor<T>(Shape{layer.out, layer.in, layer.kernel, layer.kernel}));
        model.params.emplace("b" + std::to_string(i), Tensor<T>(Shape{layer.out}));
    }
}

template <typename T>
void hook_all_relus(ModelGraph<T>& model) {
    model.hooks.clear();
    for (std::size_t i = 0; i < model.layers.size(); ++i)
        if (model.layers[i].kind == LayerKind::Relu) model.hooks.push_back(i);
}

// 784-256-128-C fully connected net over [1,28,28] pixel inputs.
template <typename T>
ModelGraph<T> make_mlp_preset(std::size_t classes = 10) {
    ModelGraph<T> model;
    model.input_shape = Shape{1, 28, 28};
    model.class_count = classes;
    model.input_scale = static_cast<T>(1.0 / 255.0);
    model.layers = {LayerSpec::flatten(),        LayerSpec::linear(784, 256), LayerSpec::relu(),
                    LayerSpec::linear(256, 128), LayerSpec::relu(),           LayerSpec::linear(128, classes)};
    for (std::size_t i = 0; i < model.layers.size(); ++i) add_layer_params(model, i);
    hook_all_relus(model);
    return model;
}

// conv8 -> relu -> avgpool -> conv16 -> relu -> avgpool -> flatten -> linear.
// Spatial dims must be divisible by 4 (two 2x2 pools).
template <typename T>
ModelGraph<T> make_cnn_preset(Shape input_shape = {1, 16, 16}, std::size_t classes = 10) {
    if (input_shape.size() != 3 || input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0)
        throw InputError("cnn preset: input must be [C,H,W] with H,W divisible by 4, got " + shape_str(input_shape));
    ModelGraph<T> model;
    model.input_shape = input_shape;
    model.class_count = classes;
    model.input_scale = static_cast<T>(1.0 / 255.0);
    const std::size_t cin = input_shape[0];
    const std::size_t flat = 16 * (input_shape[1] / 4) * (input_shape[2] / 4);
    model.layers = {LayerSpec::conv2d(cin, 8, 3, 1, 1), LayerSpec::relu(),    LayerSpec::avgpool2d(2, 2),
                    LayerSpec::conv2d(8, 16, 3, 1, 1),  LayerSpec::relu(),    LayerSpec::avgpool2d(2, 2),
                    LayerSpec::flatten(),               LayerSpec::linear(flat, classes)};
    for (std::size_t i = 0; i < model.layers.size(); ++i) add_layer_params(model, i);
    hook_all_relus(model);
    return model;
}

}  // namespace sap
