#include <benchmark/benchmark.h>

#include <random>

#include "d2m/cost_model.hpp"
#include "d2m/nanomodel.hpp"
#include "d2m/redundancy_search.hpp"
#include "d2m/similarity.hpp"
#include "d2m/surgery.hpp"
#include "d2m/trace_io.hpp"
#include "d2m/weights.hpp"

using namespace d2m;

namespace {

ModelShape bench_shape(std::uint32_t layers) {
  ModelShape s;
  s.num_layers = layers;
  s.hidden_dim = 64;
  s.mlp_dim = 256;
  s.num_heads = 8;
  s.num_kv_heads = 2;
  s.head_dim = 8;
  s.vocab_size = 128;
  return s;
}

ActivationTrace deep_trace(std::uint32_t layers) {
  return synth_trace(layers, 128, 64, {{layers / 2, 1, 0.1}, {layers - 3, 2, 0.2}}, 1);
}

}  // namespace

static void BM_BuildMatrices(benchmark::State& state) {
  const ActivationTrace t = deep_trace(static_cast<std::uint32_t>(state.range(0)));
  const auto jobs = static_cast<unsigned>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(build_matrices(t, jobs));
}
BENCHMARK(BM_BuildMatrices)->Args({24, 1})->Args({24, 4})->Unit(benchmark::kMillisecond);

static void BM_Search(benchmark::State& state) {
  const SimilarityMatrices m = build_matrices(deep_trace(24));
  SearchThresholds th;
  th.cos_threshold = 0.1;
  th.norm_tolerance = 0.3;
  for (auto _ : state) benchmark::DoNotOptimize(search(m, th));
}
BENCHMARK(BM_Search);

static void BM_ThresholdSweep(benchmark::State& state) {
  const SimilarityMatrices m = build_matrices(deep_trace(24));
  std::vector<double> grid;
  for (int i = 1; i <= 20; ++i) grid.push_back(0.01 * i);
  const auto jobs = static_cast<unsigned>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(threshold_sweep(m, grid, grid, 1.0, {1, 2, 3}, jobs));
  }
}
BENCHMARK(BM_ThresholdSweep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

static void BM_DenseForward(benchmark::State& state) {
  const nano::Model m = nano::model_from_weights(init_weights(bench_shape(8), 2));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  Matrix x(state.range(0), 64);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  for (auto _ : state) benchmark::DoNotOptimize(nano::forward(m, x));
}
BENCHMARK(BM_DenseForward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_Fuse(benchmark::State& state) {
  const WeightContainer dense = init_weights(bench_shape(12), 4);
  const FusionPlan plan = make_plan(12, {FusedBlock{2, {3, 4}}, FusedBlock{8, {9}}});
  FusionOptions o;
  o.base_copies = 4;
  o.supplementary_copies = 2;
  for (auto _ : state) benchmark::DoNotOptimize(fuse(dense, plan, o));
}
BENCHMARK(BM_Fuse)->Unit(benchmark::kMillisecond);

static void BM_CostEvaluate(benchmark::State& state) {
  ModelShape s = qwen25_05b_shape();
  s.moe = MoEShape{6, 1, 4, 2};
  for (auto _ : state) benchmark::DoNotOptimize(cost::evaluate("q", s, thor_u_profile(), {}));
}
BENCHMARK(BM_CostEvaluate);
BENCHMARK_MAIN();
