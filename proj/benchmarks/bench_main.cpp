#include <benchmark/benchmark.h>

#include "mamc/image.hpp"
#include "mamc/metrics.hpp"
#include "mamc/objective.hpp"
#include "mamc/oracle.hpp"
#include "mamc/perceptual.hpp"
#include "mamc/protector.hpp"

namespace {

void BM_Ssim(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const auto a = mamc::synthetic_artwork(size, 1), b = mamc::synthetic_artwork(size, 2);
  for (auto _ : state) benchmark::DoNotOptimize(mamc::ssim(a, b));
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256);

void BM_Psnr(benchmark::State& state) {
  const auto a = mamc::synthetic_artwork(256, 1), b = mamc::synthetic_artwork(256, 2);
  for (auto _ : state) benchmark::DoNotOptimize(mamc::psnr(a, b));
}
BENCHMARK(BM_Psnr);

void BM_Fid(benchmark::State& state) {
  std::vector<mamc::Image> a, b;
  for (int i = 0; i < state.range(0); ++i) {
    a.push_back(mamc::synthetic_artwork(64, i));
    b.push_back(mamc::synthetic_artwork(64, 1000 + i));
  }
  for (auto _ : state) benchmark::DoNotOptimize(mamc::fid(a, b).value);
}
BENCHMARK(BM_Fid)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_PerceptualDistance(benchmark::State& state) {
  const auto a = mamc::synthetic_artwork(64, 1), b = mamc::synthetic_artwork(64, 2);
  for (auto _ : state) benchmark::DoNotOptimize(mamc::perceptual_distance(a, b));
}
BENCHMARK(BM_PerceptualDistance)->Unit(benchmark::kMicrosecond);

void BM_Protect(benchmark::State& state) {
  const auto model = mamc::build_unet(mamc::UNetSpec{}, 64, 0);
  const auto img = mamc::synthetic_artwork(64, 3);
  for (auto _ : state) benchmark::DoNotOptimize(model.protect(img));
}
BENCHMARK(BM_Protect)->Unit(benchmark::kMillisecond);

void BM_Diffuse(benchmark::State& state) {
  const auto oracle = mamc::Oracle::untrained(64, 0);
  const auto img = mamc::synthetic_artwork(64, 4);
  mamc::OracleConfig c;
  c.strength = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(oracle.diffuse(img, c));
}
BENCHMARK(BM_Diffuse)->Arg(4)->Arg(5)->Arg(7)->Unit(benchmark::kMillisecond);

void BM_TrainingStep(benchmark::State& state) {
  // One forward and backward pass of the full objective through protector and oracle.
  auto model = mamc::build_unet(mamc::UNetSpec{}, 64, 0);
  const auto oracle = mamc::Oracle::untrained(64, 0);
  const auto& ex = mamc::default_extractor();
  const auto input = torch::rand({8, 3, 64, 64});
  std::vector<std::uint64_t> seeds(8);
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = mamc::derive_seed(0, 0, i);
  const auto noise = mamc::noise_image(input, seeds);
  model.net()->train();
  for (auto _ : state) {
    const auto prot = model.forward(input);
    const auto diffused = oracle.diffuse(prot, mamc::OracleConfig{}, seeds);
    auto loss = mamc::loss_total(ex, input, prot, diffused, mamc::LossWeights{}, noise).total.mean();
    loss.backward();
    benchmark::DoNotOptimize(loss.item<double>());
  }
}
BENCHMARK(BM_TrainingStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
