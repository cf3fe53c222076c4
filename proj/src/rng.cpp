#include "svf/rng.hpp"

namespace svf {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_key(std::uint64_t seed, StreamPurpose purpose, std::span<const std::uint64_t> indices) {
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
    for (auto idx : indices) {
        h = splitmix64(h ^ splitmix64(idx + 0x632be59bd9b4e019ULL));
    }
    return h;
}

SeededRng::SeededRng(std::uint64_t seed, StreamPurpose purpose, std::initializer_list<std::uint64_t> indices)
    : SeededRng(seed, purpose, std::span<const std::uint64_t>(indices.begin(), indices.size())) {}

SeededRng::SeededRng(std::uint64_t seed, StreamPurpose purpose, std::span<const std::uint64_t> indices)
    : key_(mix_key(seed, purpose, indices)), engine_(key_) {}

double SeededRng::uniform() {
    // 53 random mantissa bits; identical across standard libraries.
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double SeededRng::normal(double mean, double stddev) {
    return mean + stddev * normal_(engine_);
}

std::uint64_t SeededRng::below(std::uint64_t n) {
    if (n <= 1) return 0;
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

bool SeededRng::bernoulli(double p) { return uniform() < p; }

}  // namespace svf
