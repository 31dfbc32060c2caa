#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sapbench/defense.hpp"
#include "sapbench/model.hpp"
#include "sapbench/ops.hpp"
#include "sapbench/rng.hpp"
#include "sapbench/tensor.hpp"

namespace sap {

enum class AttackKind { None, Random, Fgsm, Iterative };

inline std::string attack_kind_name(AttackKind kind) {
    switch (kind) {
        case AttackKind::None: return "none";
        case AttackKind::Random: return "random";
        case AttackKind::Fgsm: return "fgsm";
        case AttackKind::Iterative: return "iterative";
    }
    throw InternalError("attack_kind_name: unknown kind");
}

inline AttackKind attack_kind_from_name(const std::string& name) {
    if (name == "none") return AttackKind::None;
    if (name == "random") return AttackKind::Random;
    if (name == "fgsm") return AttackKind::Fgsm;
    if (name == "iterative") return AttackKind::Iterative;
    throw InputError("unknown attack kind '" + name + "'");
}

struct PixelBox {
    double low = 0.0;
    double high = 255.0;
};

struct AttackSpec {
    AttackKind kind = AttackKind::None;
    double lambda = 0.0;  // L∞ budget, raw pixel units
    double step = 1.0;    // iterative step size k
    std::size_t mc_samples = 100;
    std::size_t mc_per_step = 10;
    // Whether the adversary differentiates the defended model (via MC) or the
    // underlying dense model.
    bool gradient_from_defended = false;
    bool integer_pixels = false;
    // Alternative MC estimator: average per-instance gradient signs instead
    // of gradients (majority vote once the caller applies sign()).
    bool sign_then_average = false;

    void validate() const {
        if (lambda < 0.0) throw InputError("attack: lambda must be non-negative");
        if (kind == AttackKind::Iterative) {
            if (step <= 0.0) throw InputError("attack: iterative step must be positive");
            if (lambda > 0.0 && step > lambda) throw InputError("attack: iterative step must not exceed lambda");
        }
        if (mc_samples < 1) throw InputError("attack: mc_samples must be at least 1");
        if (mc_per_step < 1) throw InputError("attack: mc_per_step must be at least 1");
    }
};

namespace detail {

inline void check_box(const PixelBox& box) {
    if (!(box.low < box.high)) throw InputError("pixel box: low must be below high");
}

template <typename T>
T sign_of(T v) {
    if (v > T(0)) return T(1);
    if (v < T(0)) return T(-1);
    return T(0);
}

// With integer_pixels the step is floored so integral inputs stay integral
// and inside the budget; fractional budgets lose at most their fraction.
inline double quantize_step(double v, bool integer_pixels) { return integer_pixels ? std::floor(v) : v; }

template <typename T>
void round_pixels(Tensor<T>& x) {
    for (auto& v : x.data()) v = std::nearbyint(v);
}

}  // namespace detail

// ∇ₓJ for one pass under one realized policy instance (mask frozen). Model
// parameters are left untouched; only the input collects gradient.
template <typename T>
Tensor<T> input_gradient(const ModelGraph<T>& model, const DefensePolicy<T>& policy, const Tensor<T>& x,
                         std::span<const std::uint32_t> y, RngStream& pass_rs, bool return_sign = false) {
    Tensor<T> leaf = x.clone();
    leaf.set_requires_grad(true);
    Tape<T> tape;
    Tensor<T> logits;
    if (policy.weight_family()) {
        const ParamMap<T> instance = policy.transform_params(model.params, pass_rs);
        logits = forward<T>(model, leaf, {}, &tape, &instance);
    } else {
        ActivationTransform<T> tf = [&](const Tensor<T>& h, std::size_t hook, Tape<T>* t) {
            return policy.transform_activation(h, hook, t, pass_rs);
        };
        logits = forward<T>(model, leaf, tf, &tape);
    }
    Tensor<T> loss = softmax_cross_entropy<T>(logits, y, &tape);
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError("input_gradient: non-finite loss");
    tape.backward(loss);
    Tensor<T> g(x.shape());
    auto gv = g.data();
    auto lv = leaf.grad();
    if (return_sign)
        for (std::size_t j = 0; j < gv.size(); ++j) gv[j] = detail::sign_of(lv[j]);
    else
        for (std::size_t j = 0; j < gv.size(); ++j) gv[j] = lv[j];
    return g;
}

// Monte-Carlo estimate of E_p[∇ₓJ(M_p(θ),x,y)]: mean over n fresh policy
// instances with each mask frozen during differentiation. Deterministic
// policies need exactly one pass, which also makes the result independent of
// n and of the stream.
template <typename T>
Tensor<T> mc_gradient(const ModelGraph<T>& model, const DefensePolicy<T>& policy, const Tensor<T>& x,
                      std::span<const std::uint32_t> y, std::size_t n, RngStream& rs,
                      bool sign_then_average = false) {
    if (n < 1) throw InputError("mc_gradient: sample count must be at least 1");
    const std::size_t passes = policy.deterministic() ? 1 : n;
    Tensor<T> acc;
    for (std::size_t pass = 0; pass < passes; ++pass) {
        RngStream pass_rs = rs.fork(pass, 0x6D);
        Tensor<T> g = input_gradient(model, policy, x, y, pass_rs, sign_then_average);
        if (pass == 0) {
            acc = g;
        } else {
            auto av = acc.data();
            auto gv = g.data();
            for (std::size_t j = 0; j < av.size(); ++j) av[j] += gv[j];
        }
    }
    if (passes > 1) {
        const T inv = T(1) / static_cast<T>(passes);
        for (auto& v : acc.data()) v *= inv;
    }
    return acc;
}

// x_adv = clip_box(x + λ·sign(g)), sign(0)=0.
template <typename T>
Tensor<T> fgsm(const Tensor<T>& x, const Tensor<T>& grad, double lambda, const PixelBox& box = {},
               bool integer_pixels = false) {
    if (lambda < 0.0) throw InputError("fgsm: lambda must be non-negative");
    if (grad.shape() != x.shape())
        throw DimensionError("fgsm: gradient shape " + shape_str(grad.shape()) + " does not match input " +
                             shape_str(x.shape()));
    detail::check_box(box);
    const T step = static_cast<T>(detail::quantize_step(lambda, integer_pixels));
    Tensor<T> out(x.shape());
    auto xv = x.data();
    auto gv = grad.data();
    auto ov = out.data();
    const T lo = static_cast<T>(box.low), hi = static_cast<T>(box.high);
    for (std::size_t j = 0; j < ov.size(); ++j)
        ov[j] = std::clamp(static_cast<T>(xv[j] + step * detail::sign_of(gv[j])), lo, hi);
    if (integer_pixels) detail::round_pixels(out);
    return out;
}

// x + λ·σ with Rademacher σ, box-clipped.
template <typename T>
Tensor<T> random_perturbation(const Tensor<T>& x, double lambda, const PixelBox& box, RngStream& rs,
                              bool integer_pixels = false) {
    if (lambda < 0.0) throw InputError("random perturbation: lambda must be non-negative");
    detail::check_box(box);
    const T step = static_cast<T>(detail::quantize_step(lambda, integer_pixels));
    Tensor<T> out(x.shape());
    auto xv = x.data();
    auto ov = out.data();
    const T lo = static_cast<T>(box.low), hi = static_cast<T>(box.high);
    for (std::size_t j = 0; j < ov.size(); ++j) {
        const T sigma = rs.uniform01() < 0.5 ? T(-1) : T(1);
        ov[j] = std::clamp(static_cast<T>(xv[j] + step * sigma), lo, hi);
    }
    if (integer_pixels) detail::round_pixels(out);
    return out;
}

// ⌈λ/k⌉ steps of size k, each projected into the λ-ball around x and the
// pixel box. policy == nullptr differentiates the dense model; otherwise each
// step uses an MC gradient with mc_per_step samples.
template <typename T>
Tensor<T> iterative_attack(const ModelGraph<T>& model, const DefensePolicy<T>* policy, const Tensor<T>& x,
                           std::span<const std::uint32_t> y, double lambda, double k, std::size_t mc_per_step,
                           const PixelBox& box, RngStream& rs, bool integer_pixels = false,
                           bool sign_then_average = false) {
    if (k <= 0.0) throw InputError("iterative attack: step must be positive");
    if (lambda < 0.0) throw InputError("iterative attack: lambda must be non-negative");
    if (lambda > 0.0 && k > lambda) throw InputError("iterative attack: step must not exceed lambda");
    detail::check_box(box);
    if (lambda == 0.0) return x.clone();

    const auto steps = static_cast<std::size_t>(std::ceil(lambda / k));
    const T stepv = static_cast<T>(detail::quantize_step(k, integer_pixels));
    const T lam = static_cast<T>(detail::quantize_step(lambda, integer_pixels));
    const T lo = static_cast<T>(box.low), hi = static_cast<T>(box.high);
    DensePolicy<T> dense;
    const DefensePolicy<T>& grad_policy = policy ? *policy : static_cast<const DefensePolicy<T>&>(dense);
    const std::size_t samples = policy ? mc_per_step : 1;

    Tensor<T> cur = x.clone();
    auto xv = x.data();
    for (std::size_t t = 0; t < steps; ++t) {
        RngStream step_rs = rs.fork(t, 0x73);
        Tensor<T> g = mc_gradient(model, grad_policy, cur, y, samples, step_rs, sign_then_average);
        auto cv = cur.data();
        auto gv = g.data();
        for (std::size_t j = 0; j < cv.size(); ++j) {
            T v = static_cast<T>(cv[j] + stepv * detail::sign_of(gv[j]));
            v = std::clamp(v, static_cast<T>(xv[j] - lam), static_cast<T>(xv[j] + lam));
            cv[j] = std::clamp(v, lo, hi);
        }
        if (integer_pixels) detail::round_pixels(cur);
    }
    return cur;
}

// Dispatch on an AttackSpec. defended_policy is consulted only when the spec
// draws gradients from the defended model.
template <typename T>
Tensor<T> craft_attack(const ModelGraph<T>& model, const DefensePolicy<T>* defended_policy, const AttackSpec& spec,
                       const Tensor<T>& x, std::span<const std::uint32_t> y, const PixelBox& box, RngStream& rs) {
    spec.validate();
    switch (spec.kind) {
        case AttackKind::None: return x;
        case AttackKind::Random: {
            RngStream prs = rs.fork(0, 0x72);
            return random_perturbation(x, spec.lambda, box, prs, spec.integer_pixels);
        }
        case AttackKind::Fgsm: {
            DensePolicy<T> dense;
            const DefensePolicy<T>& gp = spec.gradient_from_defended && defended_policy
                                             ? *defended_policy
                                             : static_cast<const DefensePolicy<T>&>(dense);
            RngStream grs = rs.fork(1, 0x67);
            Tensor<T> g = mc_gradient(model, gp, x, y, spec.mc_samples, grs, spec.sign_then_average);
            return fgsm(x, g, spec.lambda, box, spec.integer_pixels);
        }
        case AttackKind::Iterative: {
            const DefensePolicy<T>* gp = spec.gradient_from_defended ? defended_policy : nullptr;
            RngStream irs = rs.fork(2, 0x69);
            return iterative_attack(model, gp, x, y, spec.lambda, spec.step, spec.mc_per_step, box, irs,
                                    spec.integer_pixels, spec.sign_then_average);
        }
    }
    throw InternalError("craft_attack: unknown attack kind");
}

}  // namespace sap
