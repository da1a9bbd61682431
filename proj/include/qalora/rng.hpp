#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace qalora {

// Deterministic random source. All sampling is implemented directly on the
// raw mt19937_64 stream, so a fixed seed yields bitwise-identical draws on
// every platform and standard-library version.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller, second value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1], keeps the log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * kPi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform index in [0, n). Modulo bias is irrelevant at the sizes used
    // here (n far below 2^32).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }

private:
    static constexpr double kPi = 3.14159265358979323846;
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace qalora
