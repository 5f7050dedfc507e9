#pragma once

// Counter-based deterministic random generator.
//
// Draw i of a stream with key k is splitmix64_mix(k + i * GOLDEN), i.e. a
// pure function of (key, counter). Any value can therefore be reproduced
// from the seed plus the stream path alone, independent of draw order in
// other streams. Consumers (weight init, dropout, augmentation, shuffling,
// bootstrap resampling, synthetic scenes) each take their own stream via
// split(), so adding draws in one place never shifts another.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace aqfn {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x5851f42d4c957f2dULL)) {}

    // Child stream identified by a label; counter starts at zero.
    Rng split(std::string_view label) const {
        Rng child = *this;
        child.key_ = mix(key_ ^ fnv1a(label));
        child.counter_ = 0;
        return child;
    }

    // Child stream identified by an index (per-sample, per-epoch, ...).
    Rng split(std::uint64_t lane) const {
        Rng child = *this;
        child.key_ = mix(key_ ^ mix(lane + 0x6a09e667f3bcc909ULL));
        child.counter_ = 0;
        return child;
    }

    std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive on both ends.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; two fresh uniforms per draw.
    double normal() {
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
    static constexpr double kPi = 3.14159265358979323846;

    static std::uint64_t mix(std::uint64_t z) {
        z += kGolden;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

} // namespace aqfn
