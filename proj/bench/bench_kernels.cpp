// Serial reference kernels against their OpenMP versions on benchmark-sized
// inputs (D = 16, 8 x 8 latent maps). Thread count is the second argument of
// the parallel cases.

#include <benchmark/benchmark.h>

#include <random>

#include "apex/kernels.hpp"
#include "apex/linalg.hpp"

namespace {

using namespace apex;

struct Inputs {
  std::vector<FeatureMap> features;
  std::vector<ProtoPair> pairs;
  Matrix u;
};

const Inputs& inputs() {
  static const Inputs in = [] {
    Inputs x;
    std::mt19937_64 rng(1);
    std::normal_distribution<float> n(0.0f, 1.0f);
    std::normal_distribution<double> nd(0.0, 0.1);
    const std::size_t d = 16;
    for (int i = 0; i < 400; ++i) {
      FeatureMap z;
      z.sample_id = "b" + std::to_string(i);
      z.freq_bins = z.time_frames = z.input_freq_bins = z.input_time_frames = 8;
      z.channels = d;
      z.values.resize(8 * 8 * d);
      for (float& v : z.values) v = n(rng);
      x.features.push_back(std::move(z));
    }
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t i = 0; i < 100; ++i) x.pairs.push_back({(i * 7 + k) % 400, k});
    Matrix a(d, d);
    for (double& v : a.data()) v = nd(rng);
    x.u = mat_exp(a);
    return x;
  }();
  return in;
}

void BM_PurityBatchSerial(benchmark::State& state) {
  const auto& in = inputs();
  for (auto _ : state)
    benchmark::DoNotOptimize(kernels::serial::purity_batch(in.u, in.features, in.pairs, Scheme::kTimeFrequency));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.pairs.size()));
}

void BM_PurityBatchParallel(benchmark::State& state) {
  const auto& in = inputs();
  set_thread_limit(static_cast<int>(state.range(0)));
  for (auto _ : state)
    benchmark::DoNotOptimize(kernels::parallel::purity_batch(in.u, in.features, in.pairs, Scheme::kTimeFrequency));
  set_thread_limit(0);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.pairs.size()));
}

void BM_ApplyTransformSerial(benchmark::State& state) {
  const auto& in = inputs();
  for (auto _ : state)
    for (const auto& z : in.features) benchmark::DoNotOptimize(kernels::serial::apply_transform(in.u, z));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.features.size()));
}

void BM_ApplyTransformParallel(benchmark::State& state) {
  const auto& in = inputs();
  set_thread_limit(static_cast<int>(state.range(0)));
  for (auto _ : state)
    for (const auto& z : in.features) benchmark::DoNotOptimize(kernels::parallel::apply_transform(in.u, z));
  set_thread_limit(0);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(in.features.size()));
}

void BM_ChannelSumsSerial(benchmark::State& state) {
  const auto& in = inputs();
  for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::channel_sums(in.features));
}

void BM_ChannelSumsParallel(benchmark::State& state) {
  const auto& in = inputs();
  set_thread_limit(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(kernels::parallel::channel_sums(in.features));
  set_thread_limit(0);
}

}  // namespace

BENCHMARK(BM_PurityBatchSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_PurityBatchParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ApplyTransformSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ApplyTransformParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ChannelSumsSerial)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ChannelSumsParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
