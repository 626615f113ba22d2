#include <benchmark/benchmark.h>

#include "dod/hierarchy.hpp"
#include "dod/metrics.hpp"
#include "dod/mtd.hpp"
#include "dod/ops.hpp"
#include "dod/rng.hpp"
#include "dod/tklvae.hpp"

using namespace dod;

namespace {

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor x = rng.normal_tensor({16, c, 16, 16}), w = rng.normal_tensor({c, c, 3, 3}), b = rng.normal_tensor({c});
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * 16 * 16 * 16 * c * c * 9);
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv2dBackward(benchmark::State& state) {
  Rng rng(2);
  Tensor x = rng.normal_tensor({16, 16, 16, 16}).detach();
  const Tensor w0 = rng.normal_tensor({16, 16, 3, 3});
  Tensor w = Tensor::parameter(w0.shape(), {w0.data().begin(), w0.data().end()});
  Tensor b = Tensor::parameter({16}, std::vector<double>(16, 0.0));
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(conv2d(x, w, b, 1, 1)));
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const Tensor q = rng.normal_tensor({64, n, 32}), k = rng.normal_tensor({64, n, 32}), v = rng.normal_tensor({64, n, 32});
  for (auto _ : state) benchmark::DoNotOptimize(attention(q, k, v));
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(64);

void BM_UNetForward(benchmark::State& state) {
  UNetConfig c;
  c.base_width = static_cast<std::size_t>(state.range(0));
  const Mask3DUNet net(c);
  Rng rng(4);
  const Tensor x = rng.normal_tensor({1, 16, 4, 8, 8}), prompt = rng.normal_tensor({1, 16, 4, 16});
  const Tensor cl = rng.normal_tensor({1, 16, 4, 8, 8}), cm(Shape{1, 16, 1, 8, 8}, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, prompt, {25}, cl, cm));
}
BENCHMARK(BM_UNetForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_VaeEncodeDecode(benchmark::State& state) {
  VaeConfig c;
  const TemporalVae vae(c);
  Rng rng(5);
  const Tensor v = rng.normal_tensor({1, 16, 3, 32, 32});
  for (auto _ : state) benchmark::DoNotOptimize(vae.decode(vae.encode(v).mean));
}
BENCHMARK(BM_VaeEncodeDecode)->Unit(benchmark::kMillisecond);

void BM_FrechetDistance(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  std::vector<std::vector<double>> a(4 * d, std::vector<double>(d)), b = a;
  for (auto& row : a)
    for (double& v : row) v = rng.normal();
  for (auto& row : b)
    for (double& v : row) v = 2.0 * rng.normal();
  const FrechetStats sa = fit_gaussian(a), sb = fit_gaussian(b);
  for (auto _ : state) benchmark::DoNotOptimize(frechet_distance(sa, sb));
}
BENCHMARK(BM_FrechetDistance)->Arg(32)->Arg(128);

void BM_ClipFeatures(benchmark::State& state) {
  const FeatureExtractor fx(7);
  Rng rng(7);
  const Tensor clip = rng.normal_tensor({16, 3, 32, 32});
  for (auto _ : state) benchmark::DoNotOptimize(fx.clip_features(clip));
}
BENCHMARK(BM_ClipFeatures);

void BM_PlanFrames(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(truncate(plan_frames(16, 3), 3376));
}
BENCHMARK(BM_PlanFrames);

}  // namespace
BENCHMARK_MAIN();
