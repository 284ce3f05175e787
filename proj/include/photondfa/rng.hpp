#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace photondfa {

// splitmix64; used to derive stream seeds so that (base seed, purpose tag,
// step index) always map to the same generator state.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return mix_seed(mix_seed(a) ^ b);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b) ^ c);
}

inline std::mt19937_64 make_engine(std::uint64_t seed) {
    return std::mt19937_64(mix_seed(seed));
}

inline void fill_gaussian(std::vector<double>& out, std::uint64_t seed,
                          double mean = 0.0, double stddev = 1.0) {
    auto engine = make_engine(seed);
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : out) v = dist(engine);
}

inline std::vector<double> gaussian_vector(std::size_t n, std::uint64_t seed,
                                           double mean = 0.0, double stddev = 1.0) {
    std::vector<double> out(n);
    fill_gaussian(out, seed, mean, stddev);
    return out;
}

inline void fill_uniform(std::vector<double>& out, std::uint64_t seed,
                         double lo, double hi) {
    auto engine = make_engine(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : out) v = dist(engine);
}

}  // namespace photondfa
