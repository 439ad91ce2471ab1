#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sandwich/core/io.hpp"

namespace sandwich {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic RNG stream. Distribution transforms are implemented here
// instead of <random> distributions so that streams are reproducible and
// independent of the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(static_cast<std::uint32_t>(splitmix64(seed) >> 16)) {}

    // Stream keyed by (seed, scope). Scopes are stable strings such as
    // "sampler/<node>" or "dropout/<owner>/<step>", which makes every stream
    // independent of construction order elsewhere in the program.
    static Rng stream(std::uint64_t seed, std::string_view scope) {
        return Rng(splitmix64(seed ^ fnv1a64(scope)));
    }

    std::uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1) with 24 bits of precision.
    double uniform() { return static_cast<double>(next_u32() >> 8) * (1.0 / 16777216.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Modulo bias is irrelevant at the n used here.
    std::uint32_t uniform_int(std::uint32_t n) { return n == 0 ? 0 : next_u32() % n; }

    // Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-12) u1 = 1e-12;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = uniform_int(static_cast<std::uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace sandwich
