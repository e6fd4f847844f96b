#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace kdlab {

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

// Deterministic RNG. All draws are derived from mt19937_64 output directly
// (no std::*_distribution) so that repeated runs produce identical streams.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    int uniform_int(int n) {
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return static_cast<int>(r % un);
    }

    // Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // standard Gumbel(0,1) noise
    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        return -std::log(-std::log(u));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(uniform_int(i + 1))]);
        }
    }

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Named sub-stream of a run seed. Streams with distinct names are
// independent, so consuming one never perturbs another.
inline Rng substream(uint64_t seed, std::string_view name) {
    return Rng(splitmix64(seed ^ fnv1a64(name)));
}

}  // namespace kdlab
