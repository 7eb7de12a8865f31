// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string_view>

#include "rfx/tensor.hpp"

namespace rfx {

namespace detail {

// splitmix64 finalizer; pure 64-bit integer ops, identical on every platform.
inline uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
}

inline uint64_t fnv1a64(std::string_view bytes, uint64_t basis = 14695981039346656037ULL) {
    uint64_t h = basis;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace detail

// Counter-based generator: draw i of stream `seed` is
//   mix64(seed + (i+1) * 0x9E3779B97F4A7C15).
// Normals come from Box-Muller over two uniform draws, so the noise stream is
// fully specified by (seed, draw index). Single-owner mutable state; split
// streams with fork(), never by sharing.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        counter_ += 1;
        return detail::mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform in (0, 1]; never 0, so log() below stays finite.
    double next_uniform() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; the pair's second value is cached.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = next_uniform();
        const double u2 = next_uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Tensor normal(std::vector<int64_t> dims) {
        Tensor out(std::move(dims));
        for (double& v : out.data) v = next_normal();
        ensure_finite(out, "randn");
        return out;
    }

    Tensor uniform_symmetric(std::vector<int64_t> dims, double half_width) {
        Tensor out(std::move(dims));
        for (double& v : out.data) v = (2.0 * next_uniform() - 1.0) * half_width;
        return out;
    }

    // Child seed = hash(parent seed, label). The only sanctioned way to split.
    Rng fork(std::string_view label) const {
        return Rng(detail::mix64(seed_ ^ detail::fnv1a64(label)));
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline Tensor randn(Rng& rng, std::vector<int64_t> dims) { return rng.normal(std::move(dims)); }

}  // namespace rfx
