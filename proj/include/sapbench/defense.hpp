#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sapbench/ops.hpp"
#include "sapbench/rng.hpp"
#include "sapbench/tensor.hpp"

namespace sap {

// ---------------------------------------------------------------------------
// Policy configs
// ---------------------------------------------------------------------------

struct NoDefenseConfig {};

struct SapConfig {
    // Percent of the map size drawn per instance: r = ceil(k/100 * a).
    // May exceed 100 (draws are with replacement).
    double sample_fraction = 100.0;
    // Optional per-hook override of sample_fraction, keyed by hook position.
    std::map<std::size_t, double> per_hook_fraction;
};

struct DropoutConfig {
    double rate = 0.0;
};

enum class NoiseKind { RNW, RSW, RNA, RSA };

struct NoiseConfig {
    NoiseKind kind = NoiseKind::RNW;
    double stddev = 0.0;
};

enum class PruneKind { DWP, SWP };

struct PruneConfig {
    PruneKind kind = PruneKind::DWP;
    double keep_percent = 100.0;
};

using PolicyConfig = std::variant<NoDefenseConfig, SapConfig, DropoutConfig, NoiseConfig, PruneConfig>;

// ceil(k/100 * a): number of categorical draws for a map of size a.
inline std::size_t draw_count(double k_percent, std::size_t a) {
    if (k_percent <= 0.0) throw InputError("draw_count: sample fraction must be positive");
    const double raw = std::ceil(k_percent / 100.0 * static_cast<double>(a));
    return static_cast<std::size_t>(raw);
}

// ---------------------------------------------------------------------------
// Mask cores. Multipliers are written so the transform is h ⊙ m (or h + η),
// which is also how policies put the instance on the tape: the realized mask
// is a constant during differentiation.
// ---------------------------------------------------------------------------

namespace detail {

// One activation map: draw r categorical samples from p_j = |h_j| / Σ|h_k|,
// multiplier 1/(1-(1-p_j)^r) on sampled entries, 0 elsewhere. All-zero maps
// get the identity multiplier. Probabilities accumulate in 64-bit regardless
// of T.
template <typename T>
void sap_mask_span(std::span<const T> h, std::span<T> m, std::int64_t r, RngStream& rs) {
    if (r < 1) throw InputError("sap mask: draw count must be at least 1");
    const std::size_t n = h.size();
    if (n == 0) return;
    thread_local std::vector<double> prefix;
    thread_local std::vector<std::uint8_t> hit;
    thread_local std::vector<std::uint32_t> guide;
    prefix.resize(n);
    double run = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        run += std::abs(static_cast<double>(h[j]));
        prefix[j] = run;
    }
    const double total = run;
    if (total == 0.0) {
        std::fill(m.begin(), m.end(), T(1));
        return;
    }
    hit.assign(n, 0);
    // Selection is "first j with prefix[j] > u" (u past the end clamps to the
    // last entry); zero entries span an empty interval and are unreachable.
    // For large draw counts a bucket table gives a starting hint and a local
    // scan lands on exactly the index upper_bound would return.
    if (r >= 32 && n >= 16) {
        constexpr std::size_t kBuckets = 256;
        guide.resize(kBuckets);
        const double width = total / static_cast<double>(kBuckets);
        std::size_t pos = 0;
        for (std::size_t b = 0; b < kBuckets; ++b) {
            const double lo = width * static_cast<double>(b);
            while (pos < n && prefix[pos] <= lo) ++pos;
            guide[b] = static_cast<std::uint32_t>(pos);
        }
        const double scale = static_cast<double>(kBuckets) / total;
        for (std::int64_t d = 0; d < r; ++d) {
            const double u = rs.uniform01() * total;
            std::size_t b = static_cast<std::size_t>(u * scale);
            if (b >= kBuckets) b = kBuckets - 1;
            std::size_t j = guide[b];
            while (j < n && prefix[j] <= u) ++j;
            if (j >= n) {
                j = n - 1;
            } else {
                while (j > 0 && prefix[j - 1] > u) --j;
            }
            hit[j] = 1;
        }
    } else {
        for (std::int64_t d = 0; d < r; ++d) {
            const double u = rs.uniform01() * total;
            const auto it = std::upper_bound(prefix.begin(), prefix.end(), u);
            const std::size_t j = it == prefix.end() ? n - 1 : static_cast<std::size_t>(it - prefix.begin());
            hit[j] = 1;
        }
    }
    const double rd = static_cast<double>(r);
    for (std::size_t j = 0; j < n; ++j) {
        if (!hit[j]) {
            m[j] = T(0);
            continue;
        }
        const double p = std::abs(static_cast<double>(h[j])) / total;
        // 1-(1-p)^r via expm1/log1p so tiny p cannot underflow the keep
        // probability to zero for a sampled entry.
        const double keep = -std::expm1(rd * std::log1p(-p));
        m[j] = static_cast<T>(1.0 / keep);
    }
}

template <typename T>
void dropout_mask_span(std::span<T> m, double rate, RngStream& rs) {
    if (rate < 0.0 || rate >= 1.0) throw InputError("dropout: rate must lie in [0,1)");
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& v : m) v = rs.uniform01() < rate ? T(0) : keep_scale;
}

// 0/1 mask keeping the ceil(k/100 * n) largest |value| entries, ties broken
// toward the lower flat index.
template <typename T>
void dwp_mask_span(std::span<const T> w, std::span<T> m, double keep_percent) {
    if (keep_percent <= 0.0 || keep_percent > 100.0)
        throw InputError("dwp: keep percent must lie in (0,100]");
    const std::size_t n = w.size();
    if (n == 0) return;
    const std::size_t keep = std::min(n, draw_count(keep_percent, n));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(),
                     [&](std::size_t a, std::size_t b) {
                         const double ma = std::abs(static_cast<double>(w[a]));
                         const double mb = std::abs(static_cast<double>(w[b]));
                         if (ma != mb) return ma > mb;
                         return a < b;
                     });
    std::fill(m.begin(), m.end(), T(0));
    for (std::size_t i = 0; i < keep; ++i) m[order[i]] = T(1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Value transforms (no tape): each returns a fresh tensor of the same shape.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sap_transform(const Tensor<T>& h, std::int64_t r, RngStream& rs) {
    Tensor<T> m(h.shape());
    detail::sap_mask_span<T>(h.data(), m.data(), r, rs);
    return mul(h, m);
}

// Identical contract over a weight tensor.
template <typename T>
Tensor<T> swp_transform(const Tensor<T>& w, std::int64_t r, RngStream& rs) {
    return sap_transform(w, r, rs);
}

template <typename T>
Tensor<T> dropout_transform(const Tensor<T>& h, double rate, RngStream& rs) {
    Tensor<T> m(h.shape());
    detail::dropout_mask_span<T>(m.data(), rate, rs);
    return mul(h, m);
}

template <typename T>
Tensor<T> dwp_transform(const Tensor<T>& w, double keep_percent) {
    Tensor<T> m(w.shape());
    detail::dwp_mask_span<T>(w.data(), m.data(), keep_percent);
    return mul(w, m);
}

template <typename T>
Tensor<T> rnw_transform(const Tensor<T>& w, double s, RngStream& rs) {
    if (s < 0.0) throw InputError("additive noise: stddev must be non-negative");
    Tensor<T> out = w.clone();
    for (auto& v : out.data()) v += static_cast<T>(rs.normal(0.0, s));
    return out;
}

template <typename T>
Tensor<T> rsw_transform(const Tensor<T>& w, double s, RngStream& rs) {
    if (s < 0.0) throw InputError("scaling noise: stddev must be non-negative");
    Tensor<T> out = w.clone();
    for (auto& v : out.data()) v *= static_cast<T>(rs.normal(1.0, s));
    return out;
}

// Same math on activation maps.
template <typename T>
Tensor<T> rna_transform(const Tensor<T>& h, double s, RngStream& rs) {
    return rnw_transform(h, s, rs);
}

template <typename T>
Tensor<T> rsa_transform(const Tensor<T>& h, double s, RngStream& rs) {
    return rsw_transform(h, s, rs);
}

// ---------------------------------------------------------------------------
// Policies. A policy is immutable; every instance draw takes an explicit
// stream, so concurrent draws on separate streams are reproducible.
// Activation-family policies act at each hooked activation, once per example
// row (each row is its own map, with its own stream fork). Weight-family
// policies act once per forward pass, on weight tensors only (names starting
// with "w"); biases pass through.
// ---------------------------------------------------------------------------

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

// Deep copy: fresh storage per tensor, so later updates to the source leave
// the copy untouched (snapshots for adversarial training, checkpoints).
template <typename T>
ParamMap<T> clone_params(const ParamMap<T>& params) {
    ParamMap<T> out;
    for (const auto& [name, tensor] : params) out.emplace(name, tensor.clone());
    return out;
}

template <typename T>
class DefensePolicy {
public:
    virtual ~DefensePolicy() = default;

    virtual std::string name() const = 0;
    // Deterministic policies yield the identical instance on every draw.
    virtual bool deterministic() const = 0;
    virtual bool weight_family() const = 0;

    virtual ParamMap<T> transform_params(const ParamMap<T>& params, RngStream&) const { return params; }

    virtual Tensor<T> transform_activation(const Tensor<T>& h, std::size_t hook, Tape<T>* tape, RngStream& rs) const {
        (void)hook;
        (void)tape;
        (void)rs;
        return h;
    }

protected:
    static std::size_t rows_of(const Tensor<T>& h) { return h.ndim() >= 2 ? h.dim(0) : 1; }
};

namespace detail {

// Applies a per-row mask builder to a batched activation map and puts the
// realized mask on the tape as a constant factor.
template <typename T, typename FillRow>
Tensor<T> masked_rows(const Tensor<T>& h, std::size_t hook, Tape<T>* tape, RngStream& rs, FillRow&& fill) {
    const std::size_t rows = h.ndim() >= 2 ? h.dim(0) : 1;
    const std::size_t per = rows == 0 ? 0 : h.numel() / rows;
    Tensor<T> m(h.shape());
    for (std::size_t row = 0; row < rows; ++row) {
        RngStream row_rs = rs.fork(hook, row);
        fill(h.data().subspan(row * per, per), m.data().subspan(row * per, per), row_rs);
    }
    return mul(h, m, tape);
}

template <typename T, typename FillRow>
Tensor<T> noised_rows(const Tensor<T>& h, std::size_t hook, Tape<T>* tape, RngStream& rs, FillRow&& fill) {
    const std::size_t rows = h.ndim() >= 2 ? h.dim(0) : 1;
    const std::size_t per = rows == 0 ? 0 : h.numel() / rows;
    Tensor<T> eta(h.shape());
    for (std::size_t row = 0; row < rows; ++row) {
        RngStream row_rs = rs.fork(hook, row);
        fill(eta.data().subspan(row * per, per), row_rs);
    }
    return add(h, eta, tape);
}

}  // namespace detail

template <typename T>
class DensePolicy final : public DefensePolicy<T> {
public:
    std::string name() const override { return "dense"; }
    bool deterministic() const override { return true; }
    bool weight_family() const override { return false; }
};

template <typename T>
class SapPolicy final : public DefensePolicy<T> {
public:
    explicit SapPolicy(SapConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.sample_fraction <= 0.0) throw InputError("sap policy: sample fraction must be positive");
        for (const auto& [hook, k] : cfg_.per_hook_fraction)
            if (k <= 0.0)
                throw InputError("sap policy: per-hook fraction for hook " + std::to_string(hook) +
                                 " must be positive");
    }

    std::string name() const override { return "sap"; }
    bool deterministic() const override { return false; }
    bool weight_family() const override { return false; }

    double fraction_for(std::size_t hook) const {
        const auto it = cfg_.per_hook_fraction.find(hook);
        return it == cfg_.per_hook_fraction.end() ? cfg_.sample_fraction : it->second;
    }

    Tensor<T> transform_activation(const Tensor<T>& h, std::size_t hook, Tape<T>* tape, RngStream& rs) const override {
        const double k = fraction_for(hook);
        return detail::masked_rows(h, hook, tape, rs, [&](std::span<const T> src, std::span<T> dst, RngStream& rrs) {
            if (src.empty()) return;
            const auto r = static_cast<std::int64_t>(draw_count(k, src.size()));
            detail::sap_mask_span<T>(src, dst, r, rrs);
        });
    }

private:
    SapConfig cfg_;
};

template <typename T>
class DropoutPolicy final : public DefensePolicy<T> {
public:
    explicit DropoutPolicy(DropoutConfig cfg) : cfg_(cfg) {
        if (cfg_.rate < 0.0 || cfg_.rate >= 1.0) throw InputError("dropout policy: rate must lie in [0,1)");
    }

    std::string name() const override { return "dropout"; }
    bool deterministic() const override { return cfg_.rate == 0.0; }
    bool weight_family() const override { return false; }

    Tensor<T> transform_activation(const Tensor<T>& h, std::size_t hook, Tape<T>* tape, RngStream& rs) const override {
        if (cfg_.rate == 0.0) return h;
        return detail::masked_rows(h, hook, tape, rs, [&](std::span<const T>, std::span<T> dst, RngStream& rrs) {
            detail::dropout_mask_span<T>(dst, cfg_.rate, rrs);
        });
    }

private:
    DropoutConfig cfg_;
};

template <typename T>
class NoisePolicy final : public DefensePolicy<T> {
public:
    explicit NoisePolicy(NoiseConfig cfg) : cfg_(cfg) {
        if (cfg_.stddev < 0.0) throw InputError("noise policy: stddev must be non-negative");
    }

    std::string name() const override {
        switch (cfg_.kind) {
            case NoiseKind::RNW: return "rnw";
            case NoiseKind::RSW: return "rsw";
            case NoiseKind::RNA: return "rna";
            case NoiseKind::RSA: return "rsa";
        }
        throw InternalError("noise policy: unknown kind");
    }
    bool deterministic() const override { return cfg_.stddev == 0.0; }
    bool weight_family() const override { return cfg_.kind == NoiseKind::RNW || cfg_.kind == NoiseKind::RSW; }

    ParamMap<T> transform_params(const ParamMap<T>& params, RngStream& rs) const override {
        if (!weight_family() || cfg_.stddev == 0.0) return params;
        ParamMap<T> out;
        std::size_t index = 0;
        for (const auto& [pname, tensor] : params) {
            if (pname.starts_with("w")) {
                RngStream prs = rs.fork(index, 1);
                out.emplace(pname, cfg_.kind == NoiseKind::RNW ? rnw_transform(tensor, cfg_.stddev, prs)
                                                               : rsw_transform(tensor, cfg_.stddev, prs));
            } else {
                out.emplace(pname, tensor);
            }
            ++index;
        }
        return out;
    }

    Tensor<T> transform_activation(const Tensor<T>& h, std::size_t hook, Tape<T>* tape, RngStream& rs) const override {
        if (weight_family() || cfg_.stddev == 0.0) return h;
        if (cfg_.kind == NoiseKind::RNA) {
            return detail::noised_rows(h, hook, tape, rs, [&](std::span<T> dst, RngStream& rrs) {
                for (auto& v : dst) v = static_cast<T>(rrs.normal(0.0, cfg_.stddev));
            });
        }
        return detail::masked_rows(h, hook, tape, rs, [&](std::span<const T>, std::span<T> dst, RngStream& rrs) {
            for (auto& v : dst) v = static_cast<T>(rrs.normal(1.0, cfg_.stddev));
        });
    }

private:
    NoiseConfig cfg_;
};

template <typename T>
class PrunePolicy final : public DefensePolicy<T> {
public:
    explicit PrunePolicy(PruneConfig cfg) : cfg_(cfg) {
        if (cfg_.keep_percent <= 0.0) throw InputError("prune policy: keep percent must be positive");
        if (cfg_.kind == PruneKind::DWP && cfg_.keep_percent > 100.0)
            throw InputError("dwp policy: keep percent must not exceed 100");
    }

    std::string name() const override { return cfg_.kind == PruneKind::DWP ? "dwp" : "swp"; }
    bool deterministic() const override { return cfg_.kind == PruneKind::DWP; }
    bool weight_family() const override { return true; }

    ParamMap<T> transform_params(const ParamMap<T>& params, RngStream& rs) const override {
        ParamMap<T> out;
        std::size_t index = 0;
        for (const auto& [pname, tensor] : params) {
            if (pname.starts_with("w")) {
                if (cfg_.kind == PruneKind::DWP) {
                    out.emplace(pname, dwp_transform(tensor, cfg_.keep_percent));
                } else {
                    RngStream prs = rs.fork(index, 1);
                    const auto r = static_cast<std::int64_t>(draw_count(cfg_.keep_percent, tensor.numel()));
                    out.emplace(pname, swp_transform(tensor, r, prs));
                }
            } else {
                out.emplace(pname, tensor);
            }
            ++index;
        }
        return out;
    }

private:
    PruneConfig cfg_;
};

template <typename T>
std::unique_ptr<DefensePolicy<T>> make_policy(const PolicyConfig& config) {
    return std::visit(
        [](const auto& cfg) -> std::unique_ptr<DefensePolicy<T>> {
            using C = std::decay_t<decltype(cfg)>;
            if constexpr (std::is_same_v<C, NoDefenseConfig>) return std::make_unique<DensePolicy<T>>();
            if constexpr (std::is_same_v<C, SapConfig>) return std::make_unique<SapPolicy<T>>(cfg);
            if constexpr (std::is_same_v<C, DropoutConfig>) return std::make_unique<DropoutPolicy<T>>(cfg);
            if constexpr (std::is_same_v<C, NoiseConfig>) return std::make_unique<NoisePolicy<T>>(cfg);
            if constexpr (std::is_same_v<C, PruneConfig>) return std::make_unique<PrunePolicy<T>>(cfg);
        },
        config);
}

}  // namespace sap
