#include <benchmark/benchmark.h>

#include "refanim/rng.hpp"

// Placeholder until the backbone lands; replaced by token-injection benchmarks.
static void BM_RngNormal(benchmark::State& state) {
    refanim::Rng rng(7);
    for (auto _ : state) benchmark::DoNotOptimize(rng.normal());
}
BENCHMARK(BM_RngNormal);

BENCHMARK_MAIN();
