#pragma once

#include <cstdint>
#include <random>

namespace sap {

// Deterministic random stream with cheap key-derived forking.
//
// Streams form a tree: fork(a, b) derives a child stream whose draws are
// independent of the parent's position, so per-example / per-pass streams
// can be created in any order (or in parallel) and still reproduce exactly.
class RngStream {
public:
    explicit RngStream(std::uint64_t key);

    // Child stream keyed by (this stream's key, a, b). Does not consume
    // state from the parent.
    RngStream fork(std::uint64_t a, std::uint64_t b = 0) const;

    std::uint64_t key() const noexcept { return key_; }

    std::uint64_t next_u64();

    // Uniform on [0, 1) with 53 random bits.
    double uniform01();

    // Uniform on (0, 1].
    double uniform01_open_low();

    // Gaussian via Box-Muller (second value cached).
    double normal(double mean = 0.0, double stddev = 1.0);

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

private:
    std::uint64_t key_;
    std::mt19937_64 gen_;
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

// SplitMix64-style avalanche; used for seed derivation and content hashing.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t mix64(std::uint64_t a, std::uint64_t b);
std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c);

// Stream tags so that independent consumers of one master seed never
// collide (adversary vs defender, init vs shuffle, ...).
namespace rng_tag {
inline constexpr std::uint64_t init = 0x11;
inline constexpr std::uint64_t shuffle = 0x12;
inline constexpr std::uint64_t dropout_train = 0x13;
inline constexpr std::uint64_t adv_train = 0x14;
inline constexpr std::uint64_t attack = 0x21;
inline constexpr std::uint64_t defense_eval = 0x22;
inline constexpr std::uint64_t synth = 0x31;
}  // namespace rng_tag

}  // namespace sap
