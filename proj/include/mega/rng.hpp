#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace mega::num {

// mt19937_64 with a hand-rolled Box-Muller transform. std::normal_distribution
// is implementation-defined, so reproducible artifacts (seeded policies,
// synthetic datasets) draw through this instead.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return double(gen_() >> 11) * (1.0 / 9007199254740992.0); // 2^53
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n).
    size_t below(size_t n) {
        if (n == 0) return 0;
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return size_t(v % n);
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a; used to derive independent stream seeds from (seed, label) pairs.
inline uint64_t hash_label(uint64_t seed, const std::string& label) {
    uint64_t h = 1469598103934665603ull ^ seed;
    for (unsigned char c : label) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace mega::num
