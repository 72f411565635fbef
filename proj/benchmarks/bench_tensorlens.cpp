#include "tensorlens/linalg.hpp"
#include "tensorlens/model.hpp"
#include "tensorlens/tensorize.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace tensorlens;

namespace {

Model bench_model(std::size_t layers, std::size_t d_model) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_head = d_model / 2;
    c.d_model = d_model;
    c.d_ff = 2 * d_model;
    c.max_len = 32;
    c.vocab = 64;
    return random_model(c, 1);
}

TokenSequence bench_tokens(std::size_t len) {
    TokenSequence t;
    for (std::size_t i = 0; i < len; ++i) t.ids.push_back(static_cast<TokenId>((7 * i + 3) % 64));
    return t;
}

void BM_Forward(benchmark::State& state) {
    const auto m = bench_model(4, 16);
    const auto t = bench_tokens(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(model_forward(t, m));
}
BENCHMARK(BM_Forward)->Arg(8)->Arg(32);

void BM_FullTensor(benchmark::State& state) {
    const auto m = bench_model(static_cast<std::size_t>(state.range(0)), 16);
    const auto fwd = model_forward(bench_tokens(8), m);
    for (auto _ : state) benchmark::DoNotOptimize(full_tensor(fwd.trace, m, BiasMode::with_biases));
}
BENCHMARK(BM_FullTensor)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_OutputSlice(benchmark::State& state) {
    const auto m = bench_model(4, 16);
    const auto fwd = model_forward(bench_tokens(static_cast<std::size_t>(state.range(0))), m);
    for (auto _ : state) benchmark::DoNotOptimize(output_slice(fwd.trace, m, 0, BiasMode::bias_free));
}
BENCHMARK(BM_OutputSlice)->Arg(8)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_SpectralNorm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(1);
    std::normal_distribution<double> dist;
    DenseMatrix a(n, n);
    for (auto& v : a.data()) v = dist(rng);
    for (auto _ : state) benchmark::DoNotOptimize(spectral_norm(a));
}
BENCHMARK(BM_SpectralNorm)->Arg(32)->Arg(128);

} // namespace

BENCHMARK_MAIN();
