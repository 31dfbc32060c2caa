#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sapbench/tensor.hpp"

namespace sap {

namespace detail {

template <typename T>
bool wants_tape(const Tape<T>* tape, const Tensor<T>& a) {
    return tape != nullptr && a.requires_grad();
}

template <typename T>
bool wants_tape(const Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (detail::wants_tape(tape, a, b)) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) a.add_to_grad(g);
            if (b.requires_grad()) b.add_to_grad(g);
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (detail::wants_tape(tape, a, b)) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                auto bv2 = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                auto av2 = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c, Tape<T>* tape = nullptr) {
    Tensor<T> out(x.shape());
    auto xv = x.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
    if (detail::wants_tape(tape, x)) {
        out.set_requires_grad(true);
        tape->record([x, out, c]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    Tensor<T> out(x.shape());
    auto xv = x.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (detail::wants_tape(tape, x)) {
        out.set_requires_grad(true);
        // Subgradient at exactly 0 is 0.
        tape->record([x, out]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            auto xv2 = x.data();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv2[i] > T(0)) gx[i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (detail::wants_tape(tape, x)) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            const T g = out.grad()[0];
            auto gx = x.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor<T> out(Shape{m, n});
    {
        auto av = a.data();
        auto bv = b.data();
        auto ov = out.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const T aik = av[i * k + kk];
                if (aik == T(0)) continue;
                const T* brow = &bv[kk * n];
                T* orow = &ov[i * n];
                for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
    }
    if (detail::wants_tape(tape, a, b)) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, k, n]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                auto bv = b.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        const T* brow = &bv[kk * n];
                        const T* grow = &g[i * n];
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + kk] += acc;
                    }
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                auto av = a.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T aik = av[i * k + kk];
                        if (aik == T(0)) continue;
                        T* gbrow = &gb[kk * n];
                        const T* grow = &g[i * n];
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                    }
            }
        });
    }
    return out;
}

// Bias along the feature axis of a [N x F] tensor or the channel axis of a
// [N x C x H x W] tensor. No other broadcasting is supported.
template <typename T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& bias, Tape<T>* tape = nullptr) {
    if (bias.ndim() != 1) throw DimensionError("bias_add: bias must be 1-d, got " + shape_str(bias.shape()));
    std::size_t channels, inner;
    if (x.ndim() == 2) {
        channels = x.dim(1);
        inner = 1;
    } else if (x.ndim() == 4) {
        channels = x.dim(1);
        inner = x.dim(2) * x.dim(3);
    } else {
        throw DimensionError("bias_add: input must be 2-d or 4-d, got " + shape_str(x.shape()));
    }
    if (bias.dim(0) != channels)
        throw DimensionError("bias_add: bias " + shape_str(bias.shape()) + " does not match channel axis of " +
                             shape_str(x.shape()));
    const std::size_t batch = x.dim(0);
    Tensor<T> out(x.shape());
    {
        auto xv = x.data();
        auto bv = bias.data();
        auto ov = out.data();
        std::size_t idx = 0;
        for (std::size_t nn = 0; nn < batch; ++nn)
            for (std::size_t c = 0; c < channels; ++c) {
                const T b = bv[c];
                for (std::size_t i = 0; i < inner; ++i, ++idx) ov[idx] = xv[idx] + b;
            }
    }
    if (detail::wants_tape(tape, x, bias)) {
        out.set_requires_grad(true);
        tape->record([x, bias, out, batch, channels, inner]() mutable {
            auto g = out.grad();
            if (x.requires_grad()) x.add_to_grad(g);
            if (bias.requires_grad()) {
                auto gb = bias.grad();
                std::size_t idx = 0;
                for (std::size_t nn = 0; nn < batch; ++nn)
                    for (std::size_t c = 0; c < channels; ++c) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < inner; ++i, ++idx) acc += g[idx];
                        gb[c] += acc;
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW, cross-correlation convention)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding,
                 Tape<T>* tape = nullptr) {
    if (x.ndim() != 4) throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (kernel.ndim() != 4)
        throw DimensionError("conv2d: kernel must be [F,C,Kh,Kw], got " + shape_str(kernel.shape()));
    if (stride == 0) throw InputError("conv2d: stride must be positive");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t fout = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kc != cin)
        throw DimensionError("conv2d: kernel channels " + std::to_string(kc) + " do not match input channels " +
                             std::to_string(cin));
    if (h + 2 * padding < kh || w + 2 * padding < kw)
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                             shape_str(x.shape()) + " with padding " + std::to_string(padding));
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
    Tensor<T> out(Shape{batch, fout, oh, ow});
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
    {
        auto xv = x.data();
        auto kv = kernel.data();
        auto ov = out.data();
        for (std::size_t nn = 0; nn < batch; ++nn)
            for (std::size_t f = 0; f < fout; ++f)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        T acc = T(0);
                        for (std::size_t c = 0; c < cin; ++c) {
                            const T* xplane = &xv[(nn * cin + c) * h * w];
                            const T* kplane = &kv[((f * cin) + c) * kh * kw];
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                    acc += xplane[iy * static_cast<std::ptrdiff_t>(w) + ix] * kplane[ky * kw + kx];
                                }
                            }
                        }
                        ov[((nn * fout + f) * oh + oy) * ow + ox] = acc;
                    }
    }
    if (detail::wants_tape(tape, x, kernel)) {
        out.set_requires_grad(true);
        tape->record([x, kernel, out, batch, cin, h, w, fout, kh, kw, oh, ow, stride, pad]() mutable {
            auto g = out.grad();
            const bool gx_on = x.requires_grad();
            const bool gk_on = kernel.requires_grad();
            auto xv = x.data();
            auto kv = kernel.data();
            std::span<T> gx = gx_on ? x.grad() : std::span<T>{};
            std::span<T> gk = gk_on ? kernel.grad() : std::span<T>{};
            for (std::size_t nn = 0; nn < batch; ++nn)
                for (std::size_t f = 0; f < fout; ++f)
                    for (std::size_t oy = 0; oy < oh; ++oy)
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const T go = g[((nn * fout + f) * oh + oy) * ow + ox];
                            if (go == T(0)) continue;
                            for (std::size_t c = 0; c < cin; ++c) {
                                const std::size_t xbase = (nn * cin + c) * h * w;
                                const std::size_t kbase = ((f * cin) + c) * kh * kw;
                                for (std::size_t ky = 0; ky < kh; ++ky) {
                                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                        const std::size_t xi =
                                            xbase + static_cast<std::size_t>(iy * static_cast<std::ptrdiff_t>(w) + ix);
                                        const std::size_t ki = kbase + ky * kw + kx;
                                        if (gx_on) gx[xi] += go * kv[ki];
                                        if (gk_on) gk[ki] += go * xv[xi];
                                    }
                                }
                            }
                        }
        });
    }
    return out;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t window, std::size_t stride, Tape<T>* tape = nullptr) {
    if (x.ndim() != 4) throw DimensionError("avgpool2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (window == 0 || stride == 0) throw InputError("avgpool2d: window and stride must be positive");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < window || w < window)
        throw DimensionError("avgpool2d: window " + std::to_string(window) + " larger than input " +
                             shape_str(x.shape()));
    const std::size_t oh = (h - window) / stride + 1;
    const std::size_t ow = (w - window) / stride + 1;
    Tensor<T> out(Shape{batch, cin, oh, ow});
    const T inv = T(1) / static_cast<T>(window * window);
    {
        auto xv = x.data();
        auto ov = out.data();
        for (std::size_t nc = 0; nc < batch * cin; ++nc) {
            const T* plane = &xv[nc * h * w];
            T* oplane = &ov[nc * oh * ow];
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    T acc = T(0);
                    for (std::size_t ky = 0; ky < window; ++ky)
                        for (std::size_t kx = 0; kx < window; ++kx)
                            acc += plane[(oy * stride + ky) * w + ox * stride + kx];
                    oplane[oy * ow + ox] = acc * inv;
                }
        }
    }
    if (detail::wants_tape(tape, x)) {
        out.set_requires_grad(true);
        tape->record([x, out, batch, cin, h, w, oh, ow, window, stride, inv]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t nc = 0; nc < batch * cin; ++nc) {
                T* gplane = &gx[nc * h * w];
                const T* goplane = &g[nc * oh * ow];
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const T go = goplane[oy * ow + ox] * inv;
                        for (std::size_t ky = 0; ky < window; ++ky)
                            for (std::size_t kx = 0; kx < window; ++kx)
                                gplane[(oy * stride + ky) * w + ox * stride + kx] += go;
                    }
            }
        });
    }
    return out;
}

// Collapse everything after the batch axis: [N, ...] -> [N, prod(...)].
template <typename T>
Tensor<T> flatten(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    if (x.ndim() < 1) throw DimensionError("flatten: input needs a batch axis");
    const std::size_t batch = x.dim(0);
    std::size_t rest = 1;
    for (std::size_t d = 1; d < x.ndim(); ++d) rest *= x.dim(d);
    Tensor<T> out(Shape{batch, rest}, std::vector<T>(x.data().begin(), x.data().end()));
    if (detail::wants_tape(tape, x)) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable { x.add_to_grad(out.grad()); });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family (row-wise over [N x C])
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, Tape<T>* tape = nullptr) {
    if (logits.ndim() != 2) throw DimensionError("softmax: expects [N,C] logits, got " + shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (classes == 0) throw DimensionError("softmax: zero classes");
    Tensor<T> out(logits.shape());
    {
        auto lv = logits.data();
        auto ov = out.data();
        for (std::size_t nn = 0; nn < batch; ++nn) {
            const T* row = &lv[nn * classes];
            T* orow = &ov[nn * classes];
            T mx = row[0];
            for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
            T denom = T(0);
            for (std::size_t c = 0; c < classes; ++c) {
                orow[c] = std::exp(row[c] - mx);
                denom += orow[c];
            }
            for (std::size_t c = 0; c < classes; ++c) orow[c] /= denom;
        }
    }
    if (detail::wants_tape(tape, logits)) {
        out.set_requires_grad(true);
        tape->record([logits, out, batch, classes]() mutable {
            auto g = out.grad();
            auto y = out.data();
            auto gl = logits.grad();
            for (std::size_t nn = 0; nn < batch; ++nn) {
                const T* grow = &g[nn * classes];
                const T* yrow = &y[nn * classes];
                T dot = T(0);
                for (std::size_t c = 0; c < classes; ++c) dot += grow[c] * yrow[c];
                T* glrow = &gl[nn * classes];
                for (std::size_t c = 0; c < classes; ++c) glrow[c] += yrow[c] * (grow[c] - dot);
            }
        });
    }
    return out;
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::uint32_t> labels,
                                Tape<T>* tape = nullptr) {
    if (logits.ndim() != 2)
        throw DimensionError("softmax_cross_entropy: expects [N,C] logits, got " + shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (labels.size() != batch)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(batch));
    for (std::size_t nn = 0; nn < batch; ++nn)
        if (labels[nn] >= classes)
            throw InputError("softmax_cross_entropy: label " + std::to_string(labels[nn]) + " at row " +
                             std::to_string(nn) + " outside [0, " + std::to_string(classes) + ")");
    if (batch == 0) throw DimensionError("softmax_cross_entropy: empty batch");

    auto lv = logits.data();
    T total = T(0);
    for (std::size_t nn = 0; nn < batch; ++nn) {
        const T* row = &lv[nn * classes];
        T mx = row[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        T denom = T(0);
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
        total += std::log(denom) - (row[labels[nn]] - mx);
    }
    Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(batch));
    if (detail::wants_tape(tape, logits)) {
        out.set_requires_grad(true);
        std::vector<std::uint32_t> lab(labels.begin(), labels.end());
        tape->record([logits, out, lab = std::move(lab), batch, classes]() mutable {
            const T g = out.grad()[0] / static_cast<T>(batch);
            auto lv2 = logits.data();
            auto gl = logits.grad();
            for (std::size_t nn = 0; nn < batch; ++nn) {
                const T* row = &lv2[nn * classes];
                T* grow = &gl[nn * classes];
                T mx = row[0];
                for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
                T denom = T(0);
                for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - mx);
                for (std::size_t c = 0; c < classes; ++c) {
                    const T p = std::exp(row[c] - mx) / denom;
                    grow[c] += g * (p - (lab[nn] == c ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

}  // namespace sap
