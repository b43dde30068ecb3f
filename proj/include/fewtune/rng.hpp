#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fewtune {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

// Stable substream derivation: every independent random stream in the
// project gets its seed as derive_seed(parent_seed, tag[, index]), so
// episodes, chains and workers never share generator state.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return std::normal_distribution<double>{}(engine_); }
    double uniform() { return std::uniform_real_distribution<double>{0.0, 1.0}(engine_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>{lo, hi}(engine_);
    }
    // Uniform draw from [0, n).
    std::size_t uniform_index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>{0, n - 1}(engine_);
    }
    // Uniform draw from [lo, hi], both inclusive.
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>{lo, hi}(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace fewtune
