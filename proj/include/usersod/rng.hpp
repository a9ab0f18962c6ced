#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace usersod {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// mt19937_64 with hand-rolled draws so sequences match across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    size_t index(size_t n) { return static_cast<size_t>(engine_() % n); }
    double normal() {
        // Box-Muller; u1 kept away from 0.
        const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }
    uint64_t next() { return engine_(); }

  private:
    std::mt19937_64 engine_;
};

} // namespace usersod
