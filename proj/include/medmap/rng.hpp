#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "medmap/common.hpp"

namespace medmap {

// splitmix64: used to scramble derived seeds (seed ^ index would leave
// correlated low bits between neighboring streams).
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. mt19937_64's output sequence is pinned by the standard;
// uniform/normal are derived with explicit arithmetic instead of the
// std distributions, whose algorithms are implementation-defined.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static Rng derived(std::uint64_t seed, std::uint64_t index) {
        return Rng(splitmix64(seed ^ index));
    }

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    real uniform() { return static_cast<real>(gen_() >> 11) * 0x1.0p-53; }

    real uniform(real lo, real hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? gen_() % n : 0; }

    // standard normal via Box-Muller
    real normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        real u1 = uniform();
        real u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        real r = std::sqrt(-2.0 * std::log(u1));
        real a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    real normal(real mean, real std) { return mean + std * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    real spare_ = 0.0;
};

}  // namespace medmap
