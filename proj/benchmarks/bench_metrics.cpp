#include <benchmark/benchmark.h>

#include "csmri/metrics.hpp"
#include "csmri/rng.hpp"

using namespace csmri;

namespace {

std::vector<double> random_image(int n, uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> img(static_cast<size_t>(n) * n);
  for (auto& v : img) v = rng.uniform();
  return img;
}

void BM_Ssim(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto x = random_image(n, 1), y = random_image(n, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ssim(n, n, x, y));
  }
}
BENCHMARK(BM_Ssim)->Arg(64)->Arg(256);

void BM_Psnr(benchmark::State& state) {
  const auto x = random_image(256, 1), y = random_image(256, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(psnr(x, y, 1.0));
  }
}
BENCHMARK(BM_Psnr);

void BM_Dice(benchmark::State& state) {
  RngStream rng(3);
  std::vector<uint8_t> a(256 * 256), b(256 * 256);
  for (auto& v : a) v = rng.uniform() < 0.3;
  for (auto& v : b) v = rng.uniform() < 0.3;
  for (auto _ : state) {
    benchmark::DoNotOptimize(dice(a, b));
  }
}
BENCHMARK(BM_Dice);

}  // namespace

BENCHMARK_MAIN();
