#include <benchmark/benchmark.h>

#include "csmri/fft.hpp"
#include "csmri/kspace.hpp"
#include "csmri/losses.hpp"
#include "csmri/networks.hpp"
#include "csmri/phantom.hpp"

using namespace csmri;

namespace {

Tensor<float> random_tensor(Shape shape, uint64_t seed) {
  RngStream rng(seed);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Tensor<float> x = random_tensor({8, c, 64, 64}, 1);
  Tensor<float> w = random_tensor({c, c, 3, 3}, 2);
  Tensor<float> b({c}, 0.0f);
  for (auto _ : state) {
    auto y = conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 8LL * c * c * 9 * 64 * 64);
}
BENCHMARK(BM_Conv2dForward)->Arg(16)->Arg(32)->Arg(64);

void BM_Conv2dTrainStep(benchmark::State& state) {
  Tensor<float> x = random_tensor({8, 32, 64, 64}, 1);
  Tensor<float> w = random_tensor({32, 32, 3, 3}, 2);
  Tensor<float> b({32}, 0.0f);
  w.set_requires_grad(true);
  x.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    {
      TapeScope<float> scope(tape);
      auto y = conv2d(x, w, b, 1, 1);
      tape.backward(mean_all(mul(y, y)));
    }
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_Conv2dTrainStep);

void BM_Fft2Centered(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  RngStream rng(3);
  std::vector<std::complex<float>> buf(static_cast<size_t>(n) * n);
  for (auto& v : buf) v = {static_cast<float>(rng.normal()), static_cast<float>(rng.normal())};
  for (auto _ : state) {
    fft2_centered_inplace(buf.data(), n, n);
    benchmark::DoNotOptimize(buf.data());
  }
}
BENCHMARK(BM_Fft2Centered)->Arg(64)->Arg(128)->Arg(256);

void BM_CascadeForward(benchmark::State& state) {
  RngStream rng(4);
  CascadeNet<float> net(cascade_preset("desk"));
  net.init(rng);
  PhantomSpec spec;
  spec.train_count = 8;
  spec.val_count = 1;
  spec.test_count = 1;
  PhantomDataset ds = generate_dataset(spec);
  std::vector<KSpaceSample> samples;
  std::vector<ComplexImage> zf;
  std::vector<const ComplexImage*> zfp;
  std::vector<const KSpaceSample*> sp;
  for (const auto& item : ds.train) {
    SamplingMask mask = generate_mask(64, 64, 0.25, rng);
    samples.push_back(acquire(item.image, mask, 0.0, rng));
  }
  for (auto& s : samples) zf.push_back(zero_fill(s));
  for (size_t i = 0; i < samples.size(); ++i) {
    zfp.push_back(&zf[i]);
    sp.push_back(&samples[i]);
  }
  Tensor<float> x_u = images_to_tensor<float>(zfp);
  auto ks = KSpaceBatch<float>::from_samples(sp, {});
  for (auto _ : state) {
    auto y = net.forward(x_u, ks);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_CascadeForward);

void BM_GenerateMask(benchmark::State& state) {
  RngStream rng(5);
  for (auto _ : state) {
    auto mask = generate_mask(512, 512, 0.125, rng);
    benchmark::DoNotOptimize(mask.kept.data());
  }
}
BENCHMARK(BM_GenerateMask);

}  // namespace

BENCHMARK_MAIN();
