#pragma once

#include <cmath>
#include <cstdint>

namespace xtransct {

// SplitMix64: the project-wide seedable PRNG. Chosen over std PRNG
// distributions because its output stream is fully specified by the
// algorithm, so seeded runs are stable across platforms and compilers.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform double in [0,1) with 53 bits of randomness.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Standard normal via Box-Muller on the splitmix stream.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_double();
        double u2 = next_double();
        // Avoid log(0).
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    // Derive an independent stream for a named purpose without perturbing
    // this one (used to decouple phantom sampling from model init, etc.).
    SplitMix64 fork(std::uint64_t salt) const {
        SplitMix64 child(state_ ^ (0x2545f4914f6cdd1dULL * (salt + 1)));
        return child;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace xtransct
