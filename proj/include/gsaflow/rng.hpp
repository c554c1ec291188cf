#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "gsaflow/common.hpp"

namespace gsaflow {

/// Seeded random stream. All randomness in the project flows through
/// explicitly constructed Rng handles; there is no hidden global state.
/// uniform() and normal() are computed from raw engine output with fixed
/// formulas so draws do not depend on the standard library's distribution
/// implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller. The log argument is in (0, 1], so the
    /// result is bounded by about 8.6 in magnitude.
    double normal() {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Uniform integer in [0, n).
    int uniform_int(int n) {
        check_contract(n > 0, "uniform_int: n must be positive");
        // rejection to avoid modulo bias
        uint64_t limit = UINT64_MAX - UINT64_MAX % static_cast<uint64_t>(n);
        uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return static_cast<int>(x % static_cast<uint64_t>(n));
    }

    /// Derive an independent child stream; advances this stream by one draw.
    Rng fork() { return Rng(splitmix64(eng_())); }

    static uint64_t splitmix64(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

  private:
    std::mt19937_64 eng_;
};

}  // namespace gsaflow
