#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace casrl {

// Deterministic, platform-independent random primitives. Everything stochastic
// in the library draws through these so that a (seed, key) pair fully
// determines the value, independent of call history. std::random distributions
// are avoided on purpose: their output is implementation-defined.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Order-sensitive key combiner.
inline uint64_t mix(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2)));
}

inline uint64_t mix(uint64_t a, uint64_t b, uint64_t c) { return mix(mix(a, b), c); }
inline uint64_t mix(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return mix(mix(a, b, c), d);
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a, folded through splitmix
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001B3ULL;
    }
    return splitmix64(h);
}

// Uniform in [0,1) from the top 53 bits.
inline double u64_to_unit(uint64_t x) {
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Inverse normal CDF (Acklam's rational approximation, |rel err| < 1.2e-9).
// One uniform in, one normal out; keyed draws stay stateless.
double norminv(double p);

// Keyed (counter-based) draws.
inline double keyed_uniform(uint64_t key) { return u64_to_unit(splitmix64(key)); }
inline double keyed_normal(uint64_t key) {
    // Nudge away from 0 so norminv stays finite.
    return norminv(u64_to_unit(splitmix64(key)) + 0x1.0p-54);
}

// Small sequential stream for places that want a classic generator
// (exploration noise, batch sampling, population draws).
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6A09E667F3BCC909ULL)) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double uniform() { return u64_to_unit(next_u64()); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() { return norminv(uniform() + 0x1.0p-54); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

private:
    uint64_t state_;
};

}  // namespace casrl
