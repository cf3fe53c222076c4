// Parallel kernels against their serial references.
#include <benchmark/benchmark.h>

#include "svf/linalg.hpp"
#include "svf/rng.hpp"

using namespace svf;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    SeededRng rng(seed, StreamPurpose::Test, {r, c});
    Matrix m(r, c);
    for (auto& v : m.values()) v = rng.normal();
    return m;
}

template <Matrix (*F)(const Matrix&, const Matrix&)>
void bm_matmul(benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0));
    const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    for (auto _ : st) benchmark::DoNotOptimize(F(a, b));
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <std::vector<double> (*F)(const SvdFactors&, const Matrix&)>
void bm_contraction(benchmark::State& st) {
    const auto n = static_cast<std::size_t>(st.range(0));
    const auto f = svd(random_matrix(n, n / 2, 3));
    const Matrix g = random_matrix(n, n / 2, 4);
    for (auto _ : st) benchmark::DoNotOptimize(F(f, g));
}

}  // namespace

BENCHMARK(bm_matmul<matmul>)->Name("matmul/parallel")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_matmul<matmul_serial>)->Name("matmul/serial")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_matmul<matmul_tn>)->Name("matmul_tn/parallel")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_matmul<matmul_tn_serial>)->Name("matmul_tn/serial")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_matmul<matmul_nt>)->Name("matmul_nt/parallel")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_matmul<matmul_nt_serial>)->Name("matmul_nt/serial")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_contraction<rank1_contraction>)->Name("rank1_contraction/parallel")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(bm_contraction<rank1_contraction_serial>)->Name("rank1_contraction/serial")->RangeMultiplier(2)->Range(64, 512);

BENCHMARK_MAIN();
