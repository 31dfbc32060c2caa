// Acceptance gate: ten numbered checks, one line each, exit 0 only if all
// pass. Statistical checks use fixed seeds, so every run prints identical
// numbers; tolerances are stated on each line. Run a subset by passing
// criterion numbers as arguments, e.g. `acceptance 1 5 10`.

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <limits>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sapbench/attack.hpp"
#include "sapbench/checkpoint.hpp"
#include "sapbench/config.hpp"
#include "sapbench/dataio.hpp"
#include "sapbench/defense.hpp"
#include "sapbench/harness.hpp"
#include "sapbench/metrics.hpp"
#include "sapbench/model.hpp"
#include "sapbench/ops.hpp"
#include "sapbench/rng.hpp"
#include "sapbench/tensor.hpp"
#include "sapbench/trainer.hpp"
#include "testutil.hpp"

using namespace sap;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof buf, f, args);
    va_end(args);
    return buf;
}

double median3(double a, double b, double c) {
    std::array<double, 3> v{a, b, c};
    std::sort(v.begin(), v.end());
    return v[1];
}

// ---------------------------------------------------------------------------
// 1. Unbiasedness: E[sap_transform(h)] = h, checked entrywise against the
//    exact per-entry standard error of the estimator mean.
// ---------------------------------------------------------------------------

Outcome criterion_unbiasedness() {
    constexpr std::size_t kVectors = 50;
    constexpr std::size_t kSize = 64;
    constexpr std::size_t kInstances = 100000;
    constexpr std::int64_t kDraws[3] = {16, 64, 640};

    // Activation-profile vectors: a few dominant entries, a bulk of small
    // ones, a few exact zeros. The tiers keep every entry's hit count in a
    // sound regime for a 4-SE bound at every r: small entries miss often
    // enough to be Gaussian, dominant entries at r=640 have keep probability
    // 1.0 in 64-bit and must be hit in every instance.
    RngStream root(0xACC13);
    double max_z = 0.0;
    std::size_t zero_violations = 0, saturated_misses = 0;

    for (std::size_t v = 0; v < kVectors; ++v) {
        RngStream vrs = root.fork(v);
        std::array<std::size_t, kSize> order;
        for (std::size_t j = 0; j < kSize; ++j) order[j] = j;
        for (std::size_t j = 0; j < kSize - 1; ++j)
            std::swap(order[j], order[j + vrs.below(kSize - j)]);

        Tensor<double> h(Shape{kSize});
        auto hv = h.data();
        for (std::size_t j = 0; j < kSize; ++j) {
            double mag;
            if (j < 8)
                mag = 5.0 + 0.4 * vrs.uniform01();
            else if (j < 12)
                mag = 0.0;
            else
                mag = 0.75 + 0.05 * vrs.uniform01();
            hv[order[j]] = vrs.uniform01() < 0.5 ? -mag : mag;
        }

        double total = 0.0;
        for (double x : hv) total += std::abs(x);

        for (std::size_t ri = 0; ri < 3; ++ri) {
            const std::int64_t r = kDraws[ri];
            std::array<std::uint32_t, kSize> hits{};
            Tensor<double> m(Shape{kSize});
            auto mv = m.data();
            RngStream cell = vrs.fork(ri + 1);

            // Batched sampler: prefix sums, bucket hints, and keep factors
            // depend only on (h, r), so they are hoisted out of the instance
            // loop; per instance only the draws run and the hit set lives in
            // one 64-bit word. Every 1000th instance is cross-checked
            // bit-for-bit against sap_mask_span from the same stream state,
            // which pins the batch to the production kernel.
            std::array<double, kSize> prefix;
            double run = 0.0;
            for (std::size_t j = 0; j < kSize; ++j) {
                run += std::abs(hv[j]);
                prefix[j] = run;
            }
            const double tot = run;
            constexpr std::size_t kBuckets = 256;
            std::array<std::uint32_t, kBuckets> guide;
            {
                const double width = tot / static_cast<double>(kBuckets);
                std::size_t pos = 0;
                for (std::size_t b = 0; b < kBuckets; ++b) {
                    const double lo = width * static_cast<double>(b);
                    while (pos < kSize && prefix[pos] <= lo) ++pos;
                    guide[b] = static_cast<std::uint32_t>(pos);
                }
            }
            std::array<double, kSize> keep;
            for (std::size_t j = 0; j < kSize; ++j) {
                const double p = std::abs(hv[j]) / tot;
                keep[j] = p > 0.0 ? 1.0 / -std::expm1(static_cast<double>(r) * std::log1p(-p)) : 0.0;
            }
            const double scale = static_cast<double>(kBuckets) / tot;

            const auto draw_word = [&]() {
                std::uint64_t word = 0;
                for (std::int64_t d = 0; d < r; ++d) {
                    const double u = cell.uniform01() * tot;
                    std::size_t b = static_cast<std::size_t>(u * scale);
                    if (b >= kBuckets) b = kBuckets - 1;
                    std::size_t j = guide[b];
                    while (j < kSize && prefix[j] <= u) ++j;
                    if (j >= kSize) {
                        j = kSize - 1;
                    } else {
                        while (j > 0 && prefix[j - 1] > u) --j;
                    }
                    word |= std::uint64_t{1} << j;
                }
                return word;
            };

            std::size_t crosscheck_diffs = 0;
            for (std::size_t inst = 0; inst < kInstances; ++inst) {
                std::uint64_t word;
                if (inst % 1000 == 0) {
                    RngStream replay = cell;  // same pre-state as the batch draw
                    word = draw_word();
                    detail::sap_mask_span<double>(hv, mv, r, replay);
                    for (std::size_t j = 0; j < kSize; ++j) {
                        const double want = (word >> j) & 1 ? keep[j] : 0.0;
                        crosscheck_diffs += std::memcmp(&mv[j], &want, sizeof(double)) != 0;
                    }
                } else {
                    word = draw_word();
                }
                for (std::uint64_t w = word; w; w &= w - 1) ++hits[static_cast<std::size_t>(std::countr_zero(w))];
            }
            if (crosscheck_diffs)
                return {false, fmt("batched sampler diverged from sap_mask_span in %zu mask entries",
                                   crosscheck_diffs)};
            for (std::size_t j = 0; j < kSize; ++j) {
                if (hv[j] == 0.0) {
                    zero_violations += hits[j] != 0;
                    continue;
                }
                // Each kept instance contributes exactly h_j/q_j, so the
                // empirical mean is h_j * hits / (N q_j) and the 4-SE check
                // reduces to the binomial z-score of the hit count.
                const double p = std::abs(hv[j]) / total;
                const double q = -std::expm1(static_cast<double>(r) * std::log1p(-p));
                const double N = static_cast<double>(kInstances);
                if (q == 1.0) {
                    saturated_misses += hits[j] != kInstances;
                    continue;
                }
                const double z = std::abs(static_cast<double>(hits[j]) - N * q) / std::sqrt(N * q * (1.0 - q));
                max_z = std::max(max_z, z);
            }
        }
    }

    Outcome out;
    out.pass = max_z <= 4.0 && zero_violations == 0 && saturated_misses == 0;
    out.detail = fmt("max |mean-h|/SE = %.3f over 50 vectors (a=64, r in {16,64,640}, N=1e5; bound 4 SE); "
                     "zero-entry violations %zu, missed always-kept entries %zu",
                     max_z, zero_violations, saturated_misses);
    return out;
}

// ---------------------------------------------------------------------------
// 2. Exact keep-set distribution: empirical keep-set frequencies vs the exact
//    law from enumerating all a^r categorical draw sequences.
// ---------------------------------------------------------------------------

Outcome criterion_exact_distribution() {
    constexpr std::size_t kSamples = 100000;
    const double grid[3] = {0.0, 1.0, 2.0};

    RngStream root(0xACC20);
    double min_p = 1.0;
    std::size_t cells = 0;
    std::size_t exact_cells = 0;  // single-outcome cells, checked for exact match

    for (std::size_t a = 1; a <= 3; ++a) {
        std::size_t combos = 1;
        for (std::size_t i = 0; i < a; ++i) combos *= 3;
        for (std::size_t c = 0; c < combos; ++c) {
            std::vector<double> h(a);
            std::size_t rem = c;
            double total = 0.0;
            for (std::size_t j = 0; j < a; ++j) {
                h[j] = grid[rem % 3] * (j % 2 ? -1.0 : 1.0);  // signs must not matter
                rem /= 3;
                total += std::abs(h[j]);
            }
            if (total == 0.0) continue;

            for (std::int64_t r = 1; r <= 3; ++r) {
                // Exact law: walk every draw sequence, multiply its probability.
                std::vector<double> prob(std::size_t{1} << a, 0.0);
                std::size_t seqs = 1;
                for (std::int64_t i = 0; i < r; ++i) seqs *= a;
                for (std::size_t s = 0; s < seqs; ++s) {
                    std::size_t mask = 0, srem = s;
                    double p = 1.0;
                    for (std::int64_t i = 0; i < r; ++i) {
                        const std::size_t d = srem % a;
                        srem /= a;
                        mask |= std::size_t{1} << d;
                        p *= std::abs(h[d]) / total;
                    }
                    prob[mask] += p;
                }

                std::vector<std::size_t> count(std::size_t{1} << a, 0);
                Tensor<double> ht(Shape{a}, h);
                RngStream crs = root.fork(cells);
                for (std::size_t s = 0; s < kSamples; ++s) {
                    RngStream srs = crs.fork(s);
                    Tensor<double> outv = sap_transform(ht, r, srs);
                    std::size_t mask = 0;
                    auto ov = outv.data();
                    for (std::size_t j = 0; j < a; ++j)
                        if (ov[j] != 0.0) mask |= std::size_t{1} << j;
                    ++count[mask];
                }
                ++cells;

                // Bins with expected < 5 merge into one bucket.
                double chi2 = 0.0, tail_exp = 0.0;
                std::size_t tail_obs = 0, bins = 0;
                for (std::size_t mask = 0; mask < prob.size(); ++mask) {
                    if (prob[mask] <= 0.0) {
                        if (count[mask]) return {false, fmt("impossible keep-set observed (a=%zu, r=%lld)", a,
                                                            static_cast<long long>(r))};
                        continue;
                    }
                    const double expd = prob[mask] * static_cast<double>(kSamples);
                    if (expd < 5.0) {
                        tail_exp += expd;
                        tail_obs += count[mask];
                        continue;
                    }
                    const double d = static_cast<double>(count[mask]) - expd;
                    chi2 += d * d / expd;
                    ++bins;
                }
                if (tail_exp > 0.0) {
                    const double d = static_cast<double>(tail_obs) - tail_exp;
                    chi2 += d * d / tail_exp;
                    ++bins;
                }
                if (bins <= 1) {
                    ++exact_cells;  // distribution is a point mass; counts already checked above
                    continue;
                }
                min_p = std::min(min_p, saptest::chi_square_pvalue(chi2, static_cast<double>(bins - 1)));
            }
        }
    }

    Outcome out;
    out.pass = min_p > 0.001;
    out.detail = fmt("min chi-square p = %.4f over %zu cells (all |h| grids a<=3, r<=3, N=1e5; bound p > 0.001; "
                     "%zu point-mass cells matched exactly)",
                     min_p, cells, exact_cells);
    return out;
}

// ---------------------------------------------------------------------------
// 3. Large-r convergence: with r = 1000*a the transform is the identity to
//    within 1e-3 relative deviation. Magnitudes are bounded away from zero;
//    an entry with mass << 1/r is expected to be absent from r draws.
// ---------------------------------------------------------------------------

Outcome criterion_large_r() {
    constexpr std::size_t kTrials = 100;
    constexpr std::size_t kSize = 64;
    RngStream root(0xACC30);
    double max_dev = 0.0;
    for (std::size_t t = 0; t < kTrials; ++t) {
        RngStream trs = root.fork(t);
        Tensor<double> h(Shape{kSize});
        for (auto& x : h.data()) {
            const double mag = 0.5 + 1.5 * trs.uniform01();
            x = trs.uniform01() < 0.5 ? -mag : mag;
        }
        RngStream irs = trs.fork(0, 1);
        Tensor<double> outv = sap_transform(h, static_cast<std::int64_t>(1000 * kSize), irs);
        auto ov = outv.data();
        auto hv = h.data();
        for (std::size_t j = 0; j < kSize; ++j)
            max_dev = std::max(max_dev, std::abs(ov[j] - hv[j]) / std::abs(hv[j]));
    }
    Outcome out;
    out.pass = max_dev < 1e-3;
    out.detail = fmt("max relative deviation = %.3g over 100 trials (a=64, r=64000; bound 1e-3)", max_dev);
    return out;
}

// ---------------------------------------------------------------------------
// 4. Gradient correctness: every tape op and a 2-layer MLP loss against
//    central finite differences.
// ---------------------------------------------------------------------------

double loss_value(const Tensor<double>& out, const Tensor<double>& w) {
    double acc = 0.0;
    auto ov = out.data();
    auto wv = w.data();
    for (std::size_t i = 0; i < ov.size(); ++i) acc += ov[i] * wv[i];
    return acc;
}

Tensor<double> loss_node(const Tensor<double>& out, const Tensor<double>& w, Tape<double>* tape) {
    return sum(mul(out, w, tape), tape);
}

// Checks d(sum(op(inputs) * w))/d(input) for every input, 20 instances.
double gradcheck_op(const char* /*name*/, RngStream& root,
                    const std::function<Tensor<double>(std::vector<Tensor<double>>&, Tape<double>*)>& op,
                    const std::function<std::vector<Tensor<double>>(RngStream&)>& make_inputs) {
    double worst = 0.0;
    for (std::size_t inst = 0; inst < 20; ++inst) {
        RngStream irs = root.fork(inst);
        std::vector<Tensor<double>> inputs = make_inputs(irs);
        Tensor<double> probe = op(inputs, nullptr);
        Tensor<double> w = saptest::random_tensor<double>(probe.shape(), irs, -1.0, 1.0);

        for (auto& in : inputs) in.set_requires_grad(true);
        Tape<double> tape;
        Tensor<double> loss = loss_node(op(inputs, &tape), w, &tape);
        tape.backward(loss);

        for (auto& in : inputs) {
            auto fd = saptest::finite_diff([&] { return loss_value(op(inputs, nullptr), w); }, in);
            worst = std::max(worst, saptest::max_rel_err(in.grad(), fd));
            in.set_requires_grad(false);
        }
    }
    return worst;
}

Outcome criterion_gradients() {
    RngStream root(0xACC40);
    double worst = 0.0;
    std::string worst_op = "none";
    const auto track = [&](const char* name, double err) {
        if (err > worst) {
            worst = err;
            worst_op = name;
        }
    };

    using In = std::vector<Tensor<double>>;
    const auto rnd = [](const Shape& s, RngStream& rs, double lo = -3.0, double hi = 3.0) {
        return saptest::random_tensor<double>(s, rs, lo, hi);
    };
    // ReLU inputs keep a margin from the kink, where finite differences are
    // invalid.
    const auto rnd_off_kink = [](const Shape& s, RngStream& rs) {
        Tensor<double> t(s);
        for (auto& v : t.data()) {
            const double mag = 0.2 + 2.8 * rs.uniform01();
            v = rs.uniform01() < 0.5 ? -mag : mag;
        }
        return t;
    };

    track("add", gradcheck_op("add", root,
                              [](In& in, Tape<double>* t) { return add(in[0], in[1], t); },
                              [&](RngStream& rs) { return In{rnd(Shape{3, 4}, rs), rnd(Shape{3, 4}, rs)}; }));
    track("mul", gradcheck_op("mul", root,
                              [](In& in, Tape<double>* t) { return mul(in[0], in[1], t); },
                              [&](RngStream& rs) { return In{rnd(Shape{2, 5}, rs), rnd(Shape{2, 5}, rs)}; }));
    track("scale", gradcheck_op("scale", root,
                                [](In& in, Tape<double>* t) { return scale(in[0], 1.7, t); },
                                [&](RngStream& rs) { return In{rnd(Shape{7}, rs)}; }));
    track("relu", gradcheck_op("relu", root,
                               [](In& in, Tape<double>* t) { return relu(in[0], t); },
                               [&](RngStream& rs) { return In{rnd_off_kink(Shape{4, 4}, rs)}; }));
    track("sum", gradcheck_op("sum", root,
                              [](In& in, Tape<double>* t) { return sum(in[0], t); },
                              [&](RngStream& rs) { return In{rnd(Shape{6}, rs)}; }));
    track("matmul", gradcheck_op("matmul", root,
                                 [](In& in, Tape<double>* t) { return matmul(in[0], in[1], t); },
                                 [&](RngStream& rs) { return In{rnd(Shape{3, 4}, rs), rnd(Shape{4, 2}, rs)}; }));
    track("bias_add", gradcheck_op("bias_add", root,
                                   [](In& in, Tape<double>* t) { return bias_add(in[0], in[1], t); },
                                   [&](RngStream& rs) { return In{rnd(Shape{3, 5}, rs), rnd(Shape{5}, rs)}; }));
    track("conv2d", gradcheck_op("conv2d", root,
                                 [](In& in, Tape<double>* t) { return conv2d(in[0], in[1], 1, 1, t); },
                                 [&](RngStream& rs) {
                                     return In{rnd(Shape{2, 2, 4, 4}, rs), rnd(Shape{3, 2, 3, 3}, rs)};
                                 }));
    track("avgpool2d", gradcheck_op("avgpool2d", root,
                                    [](In& in, Tape<double>* t) { return avgpool2d(in[0], 2, 2, t); },
                                    [&](RngStream& rs) { return In{rnd(Shape{2, 3, 4, 4}, rs)}; }));
    track("flatten", gradcheck_op("flatten", root,
                                  [](In& in, Tape<double>* t) { return flatten(in[0], t); },
                                  [&](RngStream& rs) { return In{rnd(Shape{2, 3, 2}, rs)}; }));
    track("softmax", gradcheck_op("softmax", root,
                                  [](In& in, Tape<double>* t) { return softmax(in[0], t); },
                                  [&](RngStream& rs) { return In{rnd(Shape{3, 5}, rs)}; }));

    // softmax_cross_entropy is already a scalar loss.
    {
        RngStream crs = root.fork(99);
        double err = 0.0;
        for (std::size_t inst = 0; inst < 20; ++inst) {
            RngStream irs = crs.fork(inst);
            Tensor<double> logits = rnd(Shape{4, 6}, irs);
            std::vector<std::uint32_t> labels(4);
            for (auto& l : labels) l = static_cast<std::uint32_t>(irs.below(6));
            logits.set_requires_grad(true);
            Tape<double> tape;
            Tensor<double> loss = softmax_cross_entropy<double>(logits, labels, &tape);
            tape.backward(loss);
            auto fd = saptest::finite_diff(
                [&] { return softmax_cross_entropy<double>(logits, labels).item(); }, logits);
            err = std::max(err, saptest::max_rel_err(logits.grad(), fd));
            logits.set_requires_grad(false);
        }
        track("softmax_cross_entropy", err);
    }

    // Full 2-layer MLP loss wrt input and every parameter. Instances whose
    // hidden pre-activations sit within 1e-3 of the ReLU kink are redrawn.
    {
        RngStream mrs = root.fork(100);
        double err = 0.0;
        std::size_t done = 0;
        for (std::uint64_t attempt = 0; done < 20 && attempt < 200; ++attempt) {
            RngStream irs = mrs.fork(attempt);
            Tensor<double> x = rnd(Shape{3, 8}, irs, -2.0, 2.0);
            Tensor<double> w1 = rnd(Shape{8, 6}, irs, -1.0, 1.0);
            Tensor<double> b1 = rnd(Shape{6}, irs, -0.5, 0.5);
            Tensor<double> w2 = rnd(Shape{6, 4}, irs, -1.0, 1.0);
            Tensor<double> b2 = rnd(Shape{4}, irs, -0.5, 0.5);
            std::vector<std::uint32_t> labels(3);
            for (auto& l : labels) l = static_cast<std::uint32_t>(irs.below(4));

            const auto mlp_loss = [&](Tape<double>* t) {
                auto h = relu(bias_add(matmul(x, w1, t), b1, t), t);
                auto logits = bias_add(matmul(h, w2, t), b2, t);
                return softmax_cross_entropy<double>(logits, labels, t);
            };
            bool near_kink = false;
            {
                auto pre = bias_add(matmul(x, w1), b1);
                for (double v : pre.data()) near_kink |= std::abs(v) < 1e-3;
            }
            if (near_kink) continue;
            ++done;

            for (Tensor<double>* leaf : {&x, &w1, &b1, &w2, &b2}) {
                leaf->set_requires_grad(true);
                Tape<double> tape;
                Tensor<double> loss = mlp_loss(&tape);
                tape.backward(loss);
                auto fd = saptest::finite_diff([&] { return mlp_loss(nullptr).item(); }, *leaf);
                err = std::max(err, saptest::max_rel_err(leaf->grad(), fd));
                leaf->set_requires_grad(false);
            }
        }
        if (done < 20) return {false, "mlp gradcheck could not draw 20 instances clear of the relu kink"};
        track("mlp_loss", err);
    }

    Outcome out;
    out.pass = worst < 1e-5;
    out.detail = fmt("max relative error = %.3g (worst op: %s; 12 ops + 2-layer mlp loss, 20 instances each, "
                     "central differences, bound 1e-5)",
                     worst, worst_op.c_str());
    return out;
}

// ---------------------------------------------------------------------------
// 5. Attack containment: budget and box hold for every attack kind; a one-step
//    iterative attack on a deterministic model is exactly FGSM.
// ---------------------------------------------------------------------------

ModelGraph<double> tiny_model(std::uint64_t seed) {
    ModelGraph<double> m;
    m.layers = {LayerSpec::flatten(), LayerSpec::linear(16, 8), LayerSpec::relu(), LayerSpec::linear(8, 4)};
    m.input_shape = {1, 4, 4};
    m.class_count = 4;
    m.input_scale = 1.0 / 255.0;
    for (std::size_t i = 0; i < m.layers.size(); ++i) add_layer_params(m, i);
    hook_all_relus(m);
    RngStream rs(seed);
    init_params(m, rs);
    return m;
}

Outcome criterion_containment() {
    const ModelGraph<double> model = tiny_model(0xACC50);
    DensePolicy<double> dense;
    auto sap = make_policy<double>(SapConfig{60.0, {}});
    RngStream root(0xACC51);

    double worst_overshoot = -1e9;  // max over cases of ||xadv-x||inf - lambda
    std::size_t box_violations = 0, fgsm_mismatches = 0, fgsm_pairs = 0;

    for (std::size_t c = 0; c < 1000; ++c) {
        RngStream crs = root.fork(c);
        Tensor<double> x(Shape{1, 1, 4, 4});
        for (auto& v : x.data()) v = 255.0 * crs.uniform01();
        const bool integral_input = c % 5 == 0;
        if (integral_input)
            for (auto& v : x.data()) v = std::nearbyint(v);  // hit the box corners too
        const std::uint32_t label = static_cast<std::uint32_t>(crs.below(4));

        AttackSpec spec;
        // Integer quantization preserves the budget only from an integral start.
        spec.integer_pixels = integral_input && c % 10 == 0;
        spec.lambda = c % 7 == 0 ? 0.0 : 64.0 * crs.uniform01();
        switch (c % 3) {
            case 0: spec.kind = AttackKind::Fgsm; break;
            case 1:
                spec.kind = AttackKind::Iterative;
                spec.step = spec.lambda > 0.0
                                ? spec.lambda / static_cast<double>(1 + crs.below(6))
                                : 1.0;
                break;
            default: spec.kind = AttackKind::Random; break;
        }
        if (spec.kind != AttackKind::Random && c % 4 == 1) {
            spec.gradient_from_defended = true;
            spec.mc_samples = 1 + crs.below(3);
            spec.mc_per_step = 1 + crs.below(2);
        }
        if (c % 11 == 3) spec.sign_then_average = true;

        RngStream ars = crs.fork(1);
        Tensor<double> xadv =
            craft_attack<double>(model, sap.get(), spec, x, std::span<const std::uint32_t>(&label, 1), {}, ars);

        double linf = 0.0;
        auto xv = x.data();
        auto av = xadv.data();
        for (std::size_t j = 0; j < xv.size(); ++j) {
            linf = std::max(linf, std::abs(av[j] - xv[j]));
            if (av[j] < 0.0 || av[j] > 255.0) ++box_violations;
            if (spec.integer_pixels && av[j] != std::nearbyint(av[j])) ++box_violations;
        }
        worst_overshoot = std::max(worst_overshoot, linf - spec.lambda);

        // One full-step iterative pass against the dense model is FGSM.
        if (c % 10 == 0 && spec.lambda > 0.0) {
            ++fgsm_pairs;
            AttackSpec f{AttackKind::Fgsm, spec.lambda};
            AttackSpec it{AttackKind::Iterative, spec.lambda, spec.lambda};
            RngStream r1 = crs.fork(2);
            RngStream r2 = crs.fork(2);
            Tensor<double> a =
                craft_attack<double>(model, &dense, f, x, std::span<const std::uint32_t>(&label, 1), {}, r1);
            Tensor<double> b =
                craft_attack<double>(model, &dense, it, x, std::span<const std::uint32_t>(&label, 1), {}, r2);
            auto avd = a.data();
            auto bvd = b.data();
            for (std::size_t j = 0; j < avd.size(); ++j)
                if (std::memcmp(&avd[j], &bvd[j], sizeof(double)) != 0) ++fgsm_mismatches;
        }
    }

    Outcome out;
    out.pass = worst_overshoot <= 1e-6 && box_violations == 0 && fgsm_mismatches == 0;
    out.detail = fmt("1000 cases (fgsm/iterative/random, dense and defended sources): "
                     "max budget overshoot = %.3g (bound 1e-6), box violations = %zu, "
                     "iterative(k=lambda) vs fgsm bit mismatches = %zu over %zu pairs",
                     worst_overshoot, box_violations, fgsm_mismatches, fgsm_pairs);
    return out;
}

// ---------------------------------------------------------------------------
// Shared setup for 6-9: per seed, train a dense and an adversarially-trained
// CNN on synthetic data, locate the band where FGSM halves dense accuracy,
// and record every downstream measurement once.
// ---------------------------------------------------------------------------

struct BandRun {
    double clean_dense = 0.0, clean_sap = 0.0;
    double lambda_star = 0.0;
    double dense_at_star = 0.0;
    double sap_mc1 = 0.0, sap_mc10 = 0.0, sap_mc100 = 0.0;
    double adv_at_star = 0.0, advsap_at_star = 0.0;
    double adv_at_4star = 0.0, advsap_at_4star = 0.0;
    std::vector<double> ece;  // along kEceLadder
    std::string band_note;
    bool band_found = false;
};

const std::vector<double> kEceLadder = {0, 8, 16, 24, 32, 40, 48};

double eval_cell(const ModelGraph<double>& model, const DefensePolicy<double>& policy, const AttackSpec& spec,
                 const Dataset<double>& data, std::size_t n_passes, std::uint64_t key) {
    RngStream rs(mix64(0xACC60, key));
    return evaluate(model, policy, spec, data, n_passes, rs).row.accuracy;
}

BandRun run_band_seed(std::uint64_t s) {
    const Dataset<double> train_ds = synth_dataset<double>(200, 10, 8, 96.0, 777 + s);
    const Dataset<double> eval_ds = synth_dataset<double>(20, 10, 8, 96.0, 888 + s);

    TrainConfig tc;
    tc.epochs = 60;
    tc.batch_size = 32;
    tc.lr_schedule = {{1, 0.05}, {40, 0.01}};
    tc.momentum = 0.9;
    tc.weight_decay = 0.0;

    ModelGraph<double> dense_model = make_cnn_preset<double>({1, 8, 8}, 10);
    {
        RngStream troot(1000 + s);
        RngStream irs = troot.fork(0, rng_tag::init);
        init_params(dense_model, irs);
        train(dense_model, train_ds, tc, troot);
    }

    DensePolicy<double> dense;
    auto sap = make_policy<double>(SapConfig{100.0, {}});

    BandRun run;
    std::uint64_t key = s * 1000;
    run.clean_dense = eval_cell(dense_model, dense, AttackSpec{}, eval_ds, 1, key++);
    run.clean_sap = eval_cell(dense_model, *sap, AttackSpec{}, eval_ds, 10, key++);

    // lambda* = ladder point whose dense accuracy is nearest 60% of clean,
    // within the 50-70% band.
    double best_gap = 1e9;
    for (double lam = 24.0; lam <= 46.0; lam += 2.0) {
        AttackSpec spec{AttackKind::Fgsm, lam};
        const double acc = eval_cell(dense_model, dense, spec, eval_ds, 1, key++);
        const double ratio = acc / run.clean_dense;
        if (ratio >= 0.5 && ratio <= 0.7 && std::abs(ratio - 0.6) < best_gap) {
            best_gap = std::abs(ratio - 0.6);
            run.lambda_star = lam;
            run.dense_at_star = acc;
            run.band_found = true;
        }
    }
    if (!run.band_found) {
        run.band_note = fmt("seed %llu: no ladder point in the 50-70%% band", static_cast<unsigned long long>(s));
        return run;
    }

    const auto defended_fgsm = [&](double lam, std::size_t mc) {
        AttackSpec spec{AttackKind::Fgsm, lam};
        spec.gradient_from_defended = true;
        spec.mc_samples = mc;
        return spec;
    };
    run.sap_mc1 = eval_cell(dense_model, *sap, defended_fgsm(run.lambda_star, 1), eval_ds, 10, key++);
    run.sap_mc10 = eval_cell(dense_model, *sap, defended_fgsm(run.lambda_star, 10), eval_ds, 10, key++);
    run.sap_mc100 = eval_cell(dense_model, *sap, defended_fgsm(run.lambda_star, 100), eval_ds, 10, key++);

    ModelGraph<double> adv_model = make_cnn_preset<double>({1, 8, 8}, 10);
    {
        TrainConfig atc = tc;
        atc.adv = AdvTrainConfig{0.2, run.lambda_star, AttackKind::Fgsm, 1.0};
        RngStream troot(1000 + s);
        RngStream irs = troot.fork(0, rng_tag::init);
        init_params(adv_model, irs);
        train(adv_model, train_ds, atc, troot);
    }

    const double lam4 = 4.0 * run.lambda_star;
    run.adv_at_star = eval_cell(adv_model, dense, AttackSpec{AttackKind::Fgsm, run.lambda_star}, eval_ds, 1, key++);
    run.adv_at_4star = eval_cell(adv_model, dense, AttackSpec{AttackKind::Fgsm, lam4}, eval_ds, 1, key++);
    run.advsap_at_star = eval_cell(adv_model, *sap, defended_fgsm(run.lambda_star, 100), eval_ds, 10, key++);
    run.advsap_at_4star = eval_cell(adv_model, *sap, defended_fgsm(lam4, 100), eval_ds, 10, key++);

    for (double lam : kEceLadder) {
        AttackSpec spec = lam == 0.0 ? AttackSpec{} : AttackSpec{AttackKind::Fgsm, lam};
        RngStream rs(mix64(0xACC61, s, static_cast<std::uint64_t>(lam)));
        EvalOutput<double> ev = evaluate(dense_model, dense, spec, eval_ds, 1, rs);
        run.ece.push_back(calibrate<double>(ev.confidences, ev.correct, 10).ece);
    }
    return run;
}

const std::vector<BandRun>& band_runs() {
    static const std::vector<BandRun> runs = [] {
        std::vector<BandRun> r;
        for (std::uint64_t s = 1; s <= 3; ++s) r.push_back(run_band_seed(s));
        return r;
    }();
    return runs;
}

Outcome criterion_sap_gain() {
    const auto& runs = band_runs();
    for (const auto& r : runs)
        if (!r.band_found) return {false, r.band_note};

    const double clean = median3(runs[0].clean_dense, runs[1].clean_dense, runs[2].clean_dense);
    const double gain = median3(runs[0].sap_mc100 - runs[0].dense_at_star, runs[1].sap_mc100 - runs[1].dense_at_star,
                                runs[2].sap_mc100 - runs[2].dense_at_star);
    const double clean_drop =
        median3(runs[0].clean_dense - runs[0].clean_sap, runs[1].clean_dense - runs[1].clean_sap,
                runs[2].clean_dense - runs[2].clean_sap);

    Outcome out;
    out.pass = clean >= 0.95 && gain >= 0.05 && std::abs(clean_drop) <= 0.10;
    out.detail = fmt("medians over 3 seeds: dense clean = %.3f (>= 0.95), "
                     "sap-100 gain over dense at lambda* = %+.3f (>= +0.05 under defended fgsm mc=100, 10 passes), "
                     "sap clean drop = %+.3f (within 0.10); lambda* per seed = {%g, %g, %g}",
                     clean, gain, clean_drop, runs[0].lambda_star, runs[1].lambda_star, runs[2].lambda_star);
    return out;
}

Outcome criterion_mc_ordering() {
    const auto& runs = band_runs();
    for (const auto& r : runs)
        if (!r.band_found) return {false, r.band_note};
    const double m1 = median3(runs[0].sap_mc1, runs[1].sap_mc1, runs[2].sap_mc1);
    const double m10 = median3(runs[0].sap_mc10, runs[1].sap_mc10, runs[2].sap_mc10);
    const double m100 = median3(runs[0].sap_mc100, runs[1].sap_mc100, runs[2].sap_mc100);
    Outcome out;
    out.pass = m10 <= m1 + 0.02 && m100 <= m10 + 0.02;
    out.detail = fmt("median sap-100 accuracy at lambda* vs adversary samples: mc=1 %.3f, mc=10 %.3f, mc=100 %.3f "
                     "(non-increasing within a 2-point band)",
                     m1, m10, m100);
    return out;
}

Outcome criterion_adversarial_training() {
    const auto& runs = band_runs();
    for (const auto& r : runs)
        if (!r.band_found) return {false, r.band_note};
    const double adv_gain = median3(runs[0].adv_at_star - runs[0].dense_at_star,
                                    runs[1].adv_at_star - runs[1].dense_at_star,
                                    runs[2].adv_at_star - runs[2].dense_at_star);
    const double sap_delta = median3(runs[0].advsap_at_star - runs[0].adv_at_star,
                                     runs[1].advsap_at_star - runs[1].adv_at_star,
                                     runs[2].advsap_at_star - runs[2].adv_at_star);
    const double far_delta = median3(runs[0].advsap_at_4star - runs[0].adv_at_4star,
                                     runs[1].advsap_at_4star - runs[1].adv_at_4star,
                                     runs[2].advsap_at_4star - runs[2].adv_at_4star);
    Outcome out;
    out.pass = adv_gain >= 0.10 && sap_delta >= -0.02 && far_delta >= 0.0;
    out.detail = fmt("medians over 3 seeds: adv gain over dense at lambda* = %+.3f (>= +0.10), "
                     "adv+sap minus adv at lambda* = %+.3f (>= -0.02), at 4*lambda* = %+.3f (>= 0); "
                     "adv accuracy at 4*lambda* = %.3f",
                     adv_gain, sap_delta, far_delta,
                     median3(runs[0].adv_at_4star, runs[1].adv_at_4star, runs[2].adv_at_4star));
    return out;
}

// ---------------------------------------------------------------------------
// 9. Calibration: two constructed fixtures with known ECE, then the dense
//    model's ECE trend along the attack ladder.
// ---------------------------------------------------------------------------

Outcome criterion_calibration() {
    // Dyadic confidences whose bin means equal bin accuracies exactly.
    {
        std::vector<double> conf{0.75, 0.75, 0.75, 0.75, 0.375, 0.375, 0.375, 0.375, 0.375, 0.375, 0.375, 0.375, 1.0};
        std::vector<std::uint8_t> correct{1, 1, 1, 0, 1, 0, 1, 0, 0, 0, 1, 0, 1};
        const CalibrationRecord rec = calibrate<double>(conf, correct, 4);
        if (rec.ece != 0.0) return {false, fmt("perfectly calibrated fixture gave ece = %.17g, want exactly 0", rec.ece)};
    }
    // Ten examples at confidence 0.95, five correct: ece = 0.45. The bin mean
    // of ten 0.95s is not dyadic, so equality is pinned at 1e-12.
    double fixture_delta = 0.0;
    {
        std::vector<double> conf(10, 0.95);
        std::vector<std::uint8_t> correct{1, 1, 1, 1, 1, 0, 0, 0, 0, 0};
        const CalibrationRecord rec = calibrate<double>(conf, correct, 10);
        fixture_delta = std::abs(rec.ece - 0.45);
        if (fixture_delta > 1e-12) return {false, fmt("half-right fixture gave ece = %.17g, want 0.45 (tol 1e-12)", rec.ece)};
    }

    const auto& runs = band_runs();
    for (const auto& r : runs)
        if (!r.band_found) return {false, r.band_note};
    std::vector<double> med;
    for (std::size_t i = 0; i < kEceLadder.size(); ++i)
        med.push_back(median3(runs[0].ece[i], runs[1].ece[i], runs[2].ece[i]));
    bool monotone = true;
    for (std::size_t i = 1; i < med.size(); ++i) monotone &= med[i] >= med[i - 1];
    const double rise = med.back() - med.front();

    Outcome out;
    out.pass = monotone && rise >= 0.1;
    std::string ladder;
    for (std::size_t i = 0; i < med.size(); ++i)
        ladder += fmt("%s%.3f", i ? " " : "", med[i]);
    out.detail = fmt("fixture ece 0 exact, fixture ece 0.45 within %.2g (tol 1e-12); "
                     "median dense ece along lambda {0..48}: [%s] %s, total rise %.3f (>= 0.1)",
                     fixture_delta, ladder.c_str(), monotone ? "non-decreasing" : "NOT monotone", rise);
    return out;
}

// ---------------------------------------------------------------------------
// 10. Determinism and format: an eval run's files are byte-identical across
//     reruns and thread counts; tensor files survive round trips bit-for-bit.
// ---------------------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in.good()) throw DataError("cannot open " + p.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
}

// Relative path -> bytes for every emitted file except the manifest, whose
// timestamps legitimately differ between runs.
std::map<std::string, std::string> dir_bytes(const std::filesystem::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
        out[std::filesystem::relative(e.path(), dir).string()] = slurp(e.path());
    }
    return out;
}

Outcome criterion_determinism() {
    namespace fs = std::filesystem;
    const fs::path scratch = fs::temp_directory_path() / "sapbench_acceptance";
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    // A real checkpoint for run_eval: a briefly-trained preset CNN.
    {
        const Dataset<double> ds = synth_dataset<double>(20, 10, 8, 96.0, 777);
        ModelGraph<double> model = make_cnn_preset<double>({1, 8, 8}, 10);
        RngStream troot(42);
        RngStream irs = troot.fork(0, rng_tag::init);
        init_params(model, irs);
        TrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 32;
        tc.lr_schedule = {{1, 0.05}};
        tc.momentum = 0.9;
        const History hist = train(model, ds, tc, troot);
        Checkpoint<double> ckpt;
        ckpt.model = model;
        ckpt.seed = 42;
        ckpt.epoch = hist.size();
        save_checkpoint(scratch / "ckpt", ckpt);
    }

    const nlohmann::json doc = {
        {"data", {{"synth", {{"n_per_class", 6}, {"classes", 10}, {"image_size", 8}, {"noise_std", 96.0}, {"seed", 888}}}}},
        {"defense", {{"name", "sap"}, {"sample_fraction", 100}}},
        {"attack", {{{"kind", "none"}}, {{"kind", "fgsm"}, {"defended_source", true}}}},
        {"eval", {{"lambdas", {0, 2}}, {"n_passes", 3}, {"mc_samples", {2}}, {"calibration", true}}},
        {"seed", 4242},
    };
    const ExperimentConfig cfg = parse_experiment_config(doc);

    run_eval(cfg, scratch / "ckpt", scratch / "a", 1);
    run_eval(cfg, scratch / "ckpt", scratch / "b", 3);
    run_eval(cfg, scratch / "ckpt", scratch / "c", 1);
    const auto a = dir_bytes(scratch / "a");
    const bool threads_identical = a == dir_bytes(scratch / "b");
    const bool rerun_identical = a == dir_bytes(scratch / "c");

    // Round-trip fuzz: write, read, rewrite; bits and bytes must survive.
    RngStream root(0xACC70);
    std::size_t trips = 0;
    bool fuzz_ok = true;
    const fs::path fz = scratch / "fuzz";
    fs::create_directories(fz);
    for (std::size_t t = 0; t < 1000 && fuzz_ok; ++t) {
        RngStream trs = root.fork(t);
        Shape shape(trs.below(5));
        for (auto& d : shape) d = 1 + trs.below(4);

        const auto fill = [&](auto& tensor) {
            using T = std::remove_reference_t<decltype(tensor.data()[0])>;
            for (auto& v : tensor.data()) {
                switch (trs.below(8)) {
                    case 0: v = T(0); break;
                    case 1: v = -T(0); break;
                    case 2: v = std::numeric_limits<T>::quiet_NaN(); break;
                    case 3: v = std::numeric_limits<T>::infinity(); break;
                    case 4: v = -std::numeric_limits<T>::infinity(); break;
                    case 5: v = std::numeric_limits<T>::denorm_min(); break;
                    default: v = static_cast<T>(trs.normal(0.0, 1e6)); break;
                }
            }
        };
        const auto trip = [&](auto tensor) {
            using TT = decltype(tensor);
            const fs::path p1 = fz / "t1.sapt", p2 = fz / "t2.sapt";
            write_tensor(p1, tensor);
            TT back = read_tensor<typename std::remove_reference_t<decltype(tensor.data()[0])>>(p1);
            if (back.shape() != tensor.shape()) return false;
            if (std::memcmp(back.data().data(), tensor.data().data(), tensor.numel() * sizeof(tensor.data()[0])))
                return false;
            write_tensor(p2, back);
            return slurp(p1) == slurp(p2);
        };

        if (t % 3 == 2) {
            std::vector<std::uint32_t> labels(1 + trs.below(64));
            for (auto& l : labels) l = static_cast<std::uint32_t>(trs.next_u64());
            const fs::path p1 = fz / "l1.sapt", p2 = fz / "l2.sapt";
            write_labels(p1, labels);
            const auto back = read_labels(p1);
            write_labels(p2, back);
            fuzz_ok = back == labels && slurp(p1) == slurp(p2);
        } else if (t % 3 == 1) {
            Tensor<float> ten(shape);
            fill(ten);
            fuzz_ok = trip(ten);
        } else {
            Tensor<double> ten(shape);
            fill(ten);
            fuzz_ok = trip(ten);
        }
        ++trips;
    }

    fs::remove_all(scratch);
    Outcome out;
    out.pass = threads_identical && rerun_identical && fuzz_ok;
    out.detail = fmt("eval outputs byte-identical: threads 1 vs 3 %s, rerun %s (sweep + calibration files); "
                     "round-trip fuzz %zu/1000 tensors bit-exact%s",
                     threads_identical ? "yes" : "NO", rerun_identical ? "yes" : "NO", trips,
                     fuzz_ok ? "" : " (FAILED)");
    return out;
}

struct Criterion {
    int number;
    const char* title;
    std::optional<double> time_limit_s;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "sap unbiasedness", 60.0, criterion_unbiasedness},
        {2, "sap exact keep-set law", 60.0, criterion_exact_distribution},
        {3, "large-r convergence", std::nullopt, criterion_large_r},
        {4, "gradients vs central differences", 60.0, criterion_gradients},
        {5, "attack containment", std::nullopt, criterion_containment},
        {6, "sap robustness gain at band lambda", 1800.0, criterion_sap_gain},
        {7, "adversary sample-count ordering", std::nullopt, criterion_mc_ordering},
        {8, "adversarial training interplay", std::nullopt, criterion_adversarial_training},
        {9, "calibration fixtures and trend", std::nullopt, criterion_calibration},
        {10, "determinism and tensor format", std::nullopt, criterion_determinism},
    };

    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

    bool all_pass = true;
    for (const auto& c : criteria) {
        if (!wanted.empty() && !wanted.count(c.number)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out = {false, fmt("exception: %s", e.what())};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.time_limit_s && secs > *c.time_limit_s) {
            out.pass = false;
            out.detail += fmt("; OVER TIME LIMIT %.0fs", *c.time_limit_s);
        }
        all_pass &= out.pass;
        std::printf("[%2d] %s  %s: %s  [%.1fs]\n", c.number, out.pass ? "PASS" : "FAIL", c.title, out.detail.c_str(),
                    secs);
        std::fflush(stdout);
    }
    std::printf("%s\n", all_pass ? "acceptance: all criteria passed" : "acceptance: FAILURES above");
    return all_pass ? 0 : 1;
}
