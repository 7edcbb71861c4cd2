#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace unilex {

/// Deterministic splitmix64 generator. One u64 of state, so checkpoints can
/// capture and restore the exact stream position.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Modulo bias is irrelevant at our ranges.
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    /// Standard normal via Box-Muller (stateless variant, spare discarded).
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
    double truncated_gaussian(double sigma) {
        double z = gaussian();
        while (std::abs(z) > 2.0) z = gaussian();
        return z * sigma;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

    /// Derives a subsystem seed from a master seed and a tag, so data
    /// generation, init, masking and shuffling draw from independent streams.
    static uint64_t derive(uint64_t master, std::string_view tag) {
        uint64_t h = 0xcbf29ce484222325ull ^ master;
        for (const char c : tag) {
            h ^= static_cast<uint8_t>(c);
            h *= 0x100000001b3ull;
        }
        Rng mix(h);
        return mix.next_u64();
    }

private:
    uint64_t state_;
};

}  // namespace unilex
