#include <benchmark/benchmark.h>

#include "refanim/rng.hpp"

// Placeholder until the selection module lands; replaced by top-k benchmarks.
static void BM_RngUniform(benchmark::State& state) {
    refanim::Rng rng(42);
    for (auto _ : state) benchmark::DoNotOptimize(rng.uniform());
}
BENCHMARK(BM_RngUniform);

BENCHMARK_MAIN();
