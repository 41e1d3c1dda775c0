#pragma once

#include <cmath>
#include <cstdint>

#include "emitterlab/errors.hpp"

// Self-contained generators. std::<distribution> implementations are not
// bit-specified across standard libraries; every sampler here is, so a seed
// pins the byte-identical output the reproducibility contract requires.
namespace emitterlab {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derive an independent child seed (per power point, per channel, ...) from a
// master seed and a stream index.
inline std::uint64_t child_seed(std::uint64_t master, std::uint64_t stream) {
    std::uint64_t s = master ^ (0x6a09e667f3bcc909ULL + stream * 0x3c6ef372fe94f82bULL);
    std::uint64_t a = splitmix64(s);
    std::uint64_t b = splitmix64(s);
    return a ^ (b << 1);
}

// xoshiro256++ (Blackman & Vigna), seeded via splitmix64.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        have_normal_ = false;
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform on (0, 1]: 53-bit mantissa, never returns 0 so log() is safe.
    double uniform() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    // Uniform on [0, 1): convenient for branch decisions against probabilities.
    double uniform_co() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double exponential(double rate) {
        if (!(rate > 0.0)) throw NumericError("exponential sampler needs rate > 0");
        return -std::log(uniform()) / rate;
    }

    // Box-Muller; second deviate cached.
    double normal() {
        if (have_normal_) {
            have_normal_ = false;
            return cached_normal_;
        }
        double u1 = uniform();
        double u2 = uniform_co();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_normal_ = r * std::sin(a);
        have_normal_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Gamma(shape, 1) via Marsaglia-Tsang squeeze; O(1) in shape, which keeps
    // Erlang sums over millions of cycles cheap.
    double gamma(double shape) {
        if (!(shape > 0.0)) throw NumericError("gamma sampler needs shape > 0");
        if (shape < 1.0) {
            // boost: Gamma(a) = Gamma(a+1) * U^(1/a)
            double u = uniform();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Sum of `shape` exponentials with the given rate.
    double erlang(std::uint64_t shape, double rate) {
        if (!(rate > 0.0)) throw NumericError("erlang sampler needs rate > 0");
        return gamma(static_cast<double>(shape)) / rate;
    }

    // Geometric on {1, 2, ...}: number of Bernoulli(p) trials up to and
    // including the first success. Inversion keeps it one draw.
    std::uint64_t geometric(double p) {
        if (!(p > 0.0) || p > 1.0) throw NumericError("geometric sampler needs p in (0, 1]");
        if (p == 1.0) return 1;
        double u = uniform();
        double k = std::ceil(std::log(u) / std::log1p(-p));
        if (k < 1.0) return 1;
        return static_cast<std::uint64_t>(k);
    }

  private:
    std::uint64_t s_[4];
    double cached_normal_ = 0.0;
    bool have_normal_;
};

}  // namespace emitterlab
