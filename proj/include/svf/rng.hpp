#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace svf {

// Named purposes keep streams for unrelated consumers apart even when they
// share a run seed and index tuple.
enum class StreamPurpose : std::uint64_t {
    Generic = 0,
    Init = 1,
    TaskData = 2,
    Rollout = 3,
    Shuffle = 4,
    Cem = 5,
    Dropout = 6,
    Batching = 7,
    Test = 8,
};

// Deterministic random stream. Two instances built from the same
// (seed, purpose, indices) produce the same sequence of draws; each parallel
// worker owns its own instance.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, StreamPurpose purpose = StreamPurpose::Generic,
              std::initializer_list<std::uint64_t> indices = {});
    SeededRng(std::uint64_t seed, StreamPurpose purpose, std::span<const std::uint64_t> indices);

    double uniform();                        // [0, 1)
    double normal(double mean = 0.0, double stddev = 1.0);
    std::uint64_t below(std::uint64_t n);    // uniform integer in [0, n)
    bool bernoulli(double p);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::uint64_t stream_key() const { return key_; }
    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t key_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t mix_key(std::uint64_t seed, StreamPurpose purpose, std::span<const std::uint64_t> indices);

}  // namespace svf
