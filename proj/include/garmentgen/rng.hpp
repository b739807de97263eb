#pragma once

#include <cmath>
#include <cstdint>

namespace ggen {

namespace detail {

// splitmix64 finalizer; full-period bijection on u64.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace detail

// Counter-based deterministic generator. Outputs depend only on (key, counter),
// so identical seeds and call sequences give identical streams on every
// platform. split() derives an independent substream; substreams never collide
// with the parent because the key is re-mixed with the stream index.
class SeededRng {
public:
    SeededRng() : key_(detail::mix64(0)) {}
    explicit SeededRng(uint64_t seed) : key_(detail::mix64(seed ^ 0x5851f42d4c957f2dull)) {}

    SeededRng split(uint64_t stream) const {
        SeededRng r;
        r.key_ = detail::mix64(key_ ^ detail::mix64(stream + 0x9e3779b97f4a7c15ull));
        return r;
    }

    uint64_t next_u64() { return detail::mix64(key_ + 0xd1b54a32d192ed03ull * ++counter_); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0; modulo bias is negligible for
    // the small ranges used here.
    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller. Consumes exactly two uniforms per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

}  // namespace ggen
