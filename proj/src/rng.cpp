#include "sapbench/rng.hpp"

#include <cmath>
#include <limits>

#include "sapbench/errors.hpp"

namespace sap {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) { return mix64(mix64(a) ^ (b + 0x632be59bd9b4e019ull)); }

std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix64(mix64(a, b), c); }

RngStream::RngStream(std::uint64_t key) : key_(key), gen_(mix64(key)) {}

RngStream RngStream::fork(std::uint64_t a, std::uint64_t b) const { return RngStream(mix64(key_, a, b)); }

std::uint64_t RngStream::next_u64() { return gen_(); }

double RngStream::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::uniform01_open_low() { return 1.0 - uniform01(); }

double RngStream::normal(double mean, double stddev) {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return mean + stddev * cached_normal_;
    }
    const double u1 = uniform01_open_low();
    const double u2 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    cached_normal_ = radius * std::sin(angle);
    has_cached_normal_ = true;
    return mean + stddev * radius * std::cos(angle);
}

std::uint64_t RngStream::below(std::uint64_t n) {
    if (n == 0) throw InputError("RngStream::below: n must be positive");
    // Rejection sampling for an unbiased result.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

}  // namespace sap
