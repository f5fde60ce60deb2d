#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "punet/common.hpp"

namespace punet {

// Deterministic RNG. Every consumer derives a named stream from the run seed
// so that adding a new consumer never shifts the draws of existing ones.
// Distributions are generated with explicit algorithms (not std::*_distribution)
// so sequences are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((seed >> (8 * i)) & 0xff);
        seed_mix_ = fnv1a64(buf, 8);
    }

    Rng stream(const std::string& name) const {
        std::uint64_t h = fnv1a64(name.data(), name.size(), seed_mix_);
        return Rng(h, h ^ 0x9e3779b97f4a7c15ull);
    }

    Rng stream(const std::string& name, std::uint64_t index) const {
        std::uint64_t h = fnv1a64(name.data(), name.size(), seed_mix_);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((index >> (8 * i)) & 0xff);
        h = fnv1a64(buf, 8, h);
        return Rng(h, h ^ 0x9e3779b97f4a7c15ull);
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t randint(std::uint64_t n) {
        if (n == 0) throw validation_error("randint: n must be positive");
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    // Standard normal via Box-Muller (no cached spare; keeps streams simple).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(randint(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    Rng(std::uint64_t seed, std::uint64_t mix) : gen_(seed), seed_mix_(mix) {}

    std::mt19937_64 gen_;
    std::uint64_t seed_mix_ = 0xcbf29ce484222325ull;
};

}  // namespace punet
