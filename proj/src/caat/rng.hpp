#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "caat/tensor.hpp"

namespace caat {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag));
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic RNG. Distributions are implemented by hand on top of
// mt19937_64 so that streams are reproducible independent of the standard
// library's unspecified distribution algorithms.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitmix64(seed)), seed_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // uniform integer in [0,n)
    int uniform_int(int n) {
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t lim = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= lim);
        return static_cast<int>(x % un);
    }

    // standard normal via Box-Muller, second value cached
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        const double u1 = 1.0 - uniform();  // (0,1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double stddev = 1.0) {
        for (auto& v : t.data) v = static_cast<T>(normal() * stddev);
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double a, double b) {
        for (auto& v : t.data) v = static_cast<T>(uniform(a, b));
    }

    // Independent derived stream keyed on the base seed, not on consumption
    // state; gives each pipeline stage its own reproducible sequence.
    Rng fork(uint64_t tag) const { return Rng(hash_combine(seed_, tag)); }

    uint64_t seed() const { return seed_; }

private:
    std::mt19937_64 gen_;
    uint64_t seed_ = 0;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace caat
