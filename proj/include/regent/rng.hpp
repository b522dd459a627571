#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace regent {

// Deterministic splitmix64 generator. The standard <random> engines are
// portable but the distributions are not, so all sampling used for data
// generation, designation and weight init goes through this one type.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, n). Rejection-free modulo is fine here: n is always
    // tiny relative to 2^64, so the bias is far below anything observable.
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Uniform in [0, 1) with 53 bits of precision.
    double real01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, r2;
        do {
            u = real01();
            r2 = real01();
        } while (u <= 0.0);
        const double mag = std::sqrt(-2.0 * std::log(u));
        const double ang = 6.28318530717958647692 * r2;
        spare_ = mag * std::sin(ang);
        has_spare_ = true;
        return mag * std::cos(ang);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream, e.g. one per episode or per batch.
    Rng derive(std::uint64_t stream) const {
        Rng child(state_ ^ (0x5851f42d4c957f2dULL * (stream + 1)));
        child.next_u64();
        return child;
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace regent
