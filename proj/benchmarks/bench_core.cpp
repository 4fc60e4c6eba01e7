#include <benchmark/benchmark.h>

#include <vector>

#include "slimunet/backbone.hpp"
#include "slimunet/ops.hpp"
#include "slimunet/pruning.hpp"
#include "slimunet/random.hpp"

using namespace slimunet;

namespace {

void BM_Conv2d(benchmark::State& state) {
  const auto c = state.range(0);
  Rng rng(1);
  Var<float> x(randn<float>({4, c, 16, 16}, rng));
  Var<float> w(randn<float>({c, c, 3, 3}, rng));
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d<float>(x, w, nullptr, 1, 1));
  state.SetItemsProcessed(state.iterations() * 4 * c * c * 9 * 256);
}
BENCHMARK(BM_Conv2d)->Arg(32)->Arg(64)->Arg(128);

void BM_ToyForward(benchmark::State& state) {
  const auto model = build_unet<float>(toy_config(), 0);
  const auto b = state.range(0);
  Rng rng(2);
  const auto z = randn<float>({b, 12, 8, 8}, rng);
  const auto ctx = randn<float>({b, 8, 64}, rng);
  std::vector<int> t(static_cast<std::size_t>(b), 500);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, z, ctx, nullptr, t).eps);
}
BENCHMARK(BM_ToyForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_ToyTrainStep(benchmark::State& state) {
  const auto model = build_unet<float>(toy_config(), 0);
  Rng rng(3);
  const auto z = randn<float>({8, 12, 8, 8}, rng);
  const auto ctx = randn<float>({8, 8, 64}, rng);
  const Var<float> target(randn<float>({8, 12, 8, 8}, rng));
  std::vector<int> t(8, 500);
  for (auto _ : state) {
    auto loss = ops::mse(forward(model, z, ctx, nullptr, t).eps, target);
    backward(loss);
  }
}
BENCHMARK(BM_ToyTrainStep)->Unit(benchmark::kMillisecond);

void BM_CountParams(benchmark::State& state) {
  const auto config = apply_plan(reference_sdxl_config(), canonical_plan(CanonicalPlan::VEGA));
  for (auto _ : state) benchmark::DoNotOptimize(count_params(config));
}
BENCHMARK(BM_CountParams);

void BM_EstimateFlops(benchmark::State& state) {
  const auto config = reference_sdxl_config();
  for (auto _ : state) benchmark::DoNotOptimize(estimate_flops(config, 128, 128));
}
BENCHMARK(BM_EstimateFlops);

void BM_ProgressivePlans(benchmark::State& state) {
  const auto config = toy_config();
  for (auto _ : state) benchmark::DoNotOptimize(progressive_plans(config, {0.2, 0.4, 0.5}));
}
BENCHMARK(BM_ProgressivePlans);

}  // namespace

BENCHMARK_MAIN();
