#include "topo/datagen.hpp"
#include "topo/evaluate.hpp"
#include "topo/losses.hpp"
#include "topo/simp.hpp"
#include "topo/vit.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace topo;

namespace {

fea::GridDomain grid(int n) {
  fea::GridDomain d;
  d.nx = d.ny = n;
  return d;
}

vit::Batch<float> random_batch(const vit::ModelConfig& c, int B) {
  std::mt19937 rng(1);
  std::normal_distribution<float> n(0.0f, 1.0f);
  vit::Batch<float> b;
  b.size = B;
  b.patches.resize(B * c.num_patches(), c.patch_dim());
  for (Eigen::Index k = 0; k < b.patches.size(); ++k) b.patches.data()[k] = n(rng);
  b.cond.resize(B, c.cond_features);
  for (Eigen::Index k = 0; k < b.cond.size(); ++k) b.cond.data()[k] = n(rng);
  b.masked.resize(B);
  return b;
}

void BM_StaticSolve(benchmark::State& st) {
  const auto d = grid(static_cast<int>(st.range(0)));
  const auto spec = cantilever(d.nx, d.ny, 0.4);
  const auto p = resolve(spec, d);
  const auto rho = fea::DensityField::uniform(d.nx, d.ny, 0.4);
  for (auto _ : st) {
    const auto moduli = fea::simp_moduli(d, rho, 3.0);
    benchmark::DoNotOptimize(fea::static_compliance(d, p.bc, p.load, moduli));
  }
}
BENCHMARK(BM_StaticSolve)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_InputFields(benchmark::State& st) {
  const auto d = grid(64);
  const auto p = resolve(cantilever(64, 64, 0.4), d);
  for (auto _ : st) benchmark::DoNotOptimize(fea::input_fields(d, p.bc, p.load));
}
BENCHMARK(BM_InputFields)->Unit(benchmark::kMillisecond);

void BM_SimpStatic(benchmark::State& st) {
  const auto d = grid(static_cast<int>(st.range(0)));
  simp::SimpConfig cfg;
  cfg.max_iters = 20;
  cfg.change_tol = 0.0;
  for (auto _ : st) benchmark::DoNotOptimize(simp::optimize_static(d, cantilever(d.nx, d.ny, 0.4), cfg));
  st.counters["iters"] = 20;
}
BENCHMARK(BM_SimpStatic)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_FmLoss(benchmark::State& st) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto f = fea::DensityField::uniform(64, 64, 0.0);
  for (double& v : f.values) v = u(rng) < 0.4 ? 1.0 : 0.0;
  const bool grad = st.range(0) != 0;
  for (auto _ : st) benchmark::DoNotOptimize(losses::fm_loss(f, {}, grad));
}
BENCHMARK(BM_FmLoss)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_VitForward(benchmark::State& st) {
  const auto cfg = vit::ModelConfig::preset("tiny", static_cast<int>(st.range(0)));
  vit::Model<float> m(cfg);
  m.init(1);
  const int B = static_cast<int>(st.range(1));
  const auto b = random_batch(cfg, B);
  vit::Cache<float> cache;
  for (auto _ : st) benchmark::DoNotOptimize(m.forward(b, cache).data());
  st.SetItemsProcessed(st.iterations() * B);
}
BENCHMARK(BM_VitForward)->Args({4, 1})->Args({4, 8})->Args({8, 8})->Unit(benchmark::kMillisecond);

void BM_VitForwardBackward(benchmark::State& st) {
  const auto cfg = vit::ModelConfig::preset("tiny", static_cast<int>(st.range(0)));
  vit::Model<float> m(cfg);
  m.init(1);
  const int B = static_cast<int>(st.range(1));
  const auto b = random_batch(cfg, B);
  vit::Cache<float> cache;
  vit::ParamVec<float> grads(m.params().size(), 0.0f);
  vit::Mat<float> dy = vit::Mat<float>::Constant(B, cfg.nx * cfg.ny, 1e-3f);
  for (auto _ : st) {
    m.forward(b, cache);
    m.backward(b, cache, dy, grads);
    benchmark::DoNotOptimize(grads.data());
  }
  st.SetItemsProcessed(st.iterations() * B);
}
BENCHMARK(BM_VitForwardBackward)->Args({4, 1})->Args({4, 2})->Args({4, 4})->Args({4, 8})->Args({8, 8})->Unit(benchmark::kMillisecond);

void BM_FftFeatures(benchmark::State& st) {
  const auto s = fea::DynamicLoadSignal::make(fea::SignalKind::impulse, 64);
  for (auto _ : st) benchmark::DoNotOptimize(data::fft_features(s));
}
BENCHMARK(BM_FftFeatures);

}  // namespace

BENCHMARK_MAIN();
