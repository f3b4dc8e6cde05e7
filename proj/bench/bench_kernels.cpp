// Serial reference kernels against their OpenMP counterparts.
#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "ibit/kernels.hpp"

namespace {

using Gemm = void (*)(const double *, const double *, double *, std::size_t, std::size_t, std::size_t);

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (double &x : v)
        x = u(rng);
    return v;
}

template <Gemm Kernel> void bm_gemm(benchmark::State &state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_buffer(n * n, 1);
    const auto b = random_buffer(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Kernel(a.data(), b.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
        benchmark::ClobberMemory();
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <void (*Kernel)(const double *, const double *, double *, std::size_t)>
void bm_hadamard(benchmark::State &state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_buffer(n, 1);
    const auto b = random_buffer(n, 2);
    std::vector<double> c(n);
    for (auto _ : state) {
        Kernel(a.data(), b.data(), c.data(), n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * n * 3 * sizeof(double)));
}

namespace s = ibit::kernels::serial;
namespace p = ibit::kernels::parallel;

BENCHMARK(bm_gemm<s::gemm_nn>)->Name("gemm_nn/serial")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_gemm<p::gemm_nn>)->Name("gemm_nn/parallel")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_gemm<s::gemm_nt>)->Name("gemm_nt/serial")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_gemm<p::gemm_nt>)->Name("gemm_nt/parallel")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_gemm<s::gemm_tn>)->Name("gemm_tn/serial")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_gemm<p::gemm_tn>)->Name("gemm_tn/parallel")->RangeMultiplier(2)->Range(32, 512);
BENCHMARK(bm_hadamard<s::hadamard>)->Name("hadamard/serial")->Range(1 << 12, 1 << 20);
BENCHMARK(bm_hadamard<p::hadamard>)->Name("hadamard/parallel")->Range(1 << 12, 1 << 20);

} // namespace

BENCHMARK_MAIN();
