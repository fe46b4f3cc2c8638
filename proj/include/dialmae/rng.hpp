#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace dialmae {

// Seed derivation for named sub-streams. All randomness in a run flows from a
// single master seed; each stage (corpus/masking/init/shuffle/...) draws from
// its own derived stream so changing one stage's consumption does not perturb
// the others.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, std::string_view stream) {
    return splitmix64(master ^ fnv1a64(stream));
}

inline uint64_t derive_seed(uint64_t master, std::string_view stream, uint64_t a, uint64_t b = 0) {
    uint64_t h = derive_seed(master, stream);
    h = splitmix64(h ^ splitmix64(a + 0x51ed2701));
    h = splitmix64(h ^ splitmix64(b + 0x2545f491));
    return h;
}

// Deterministic RNG. The engine is std::mt19937_64 (bit-exact per the
// standard); the distributions are implemented here because the standard
// library's are not pinned across implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased integer in [0, n). n must be > 0.
    uint64_t uniform_below(uint64_t n) {
        const uint64_t threshold = (0ull - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * M_PI * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    // Normal(0, stddev) re-drawn until within clip standard deviations.
    double truncated_normal(double stddev, double clip = 2.0) {
        double z = normal();
        while (std::abs(z) > clip) z = normal();
        return z * stddev;
    }

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace dialmae
