#include <benchmark/benchmark.h>

#include "voxflow/ops.hpp"
#include "voxflow/rng.hpp"

using namespace voxflow;

namespace {

Tensor3f random_tensor(int64_t b, int64_t c, int64_t t, Rng& rng) {
  Tensor3f x(b, c, t);
  for (int64_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());
  return x;
}

void BM_conv1d_width3(benchmark::State& state) {
  Rng rng(1);
  const int64_t hidden = state.range(0);
  auto in = random_tensor(16, hidden, 256, rng);
  auto k = random_tensor(8, hidden, 3, rng);
  std::vector<float> bias(8, 0.1f);
  for (auto _ : state) {
    auto out = conv1d(in, k, std::span<const float>(bias), 1);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * 16 * hidden * 8 * 3 * 256);
}
BENCHMARK(BM_conv1d_width3)->Arg(64)->Arg(128)->Arg(512);

void BM_channel_matmul(benchmark::State& state) {
  Rng rng(2);
  const int64_t c = state.range(0);
  auto in = random_tensor(16, c, 4096 / c, rng);
  auto W = random_tensor(c, c, 1, rng);
  for (auto _ : state) {
    auto out = channel_matmul(in, W);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_channel_matmul)->Arg(16)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
