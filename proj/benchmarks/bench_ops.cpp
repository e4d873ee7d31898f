#include <random>

#include <benchmark/benchmark.h>

#include <hded/ops.hpp>
#include <hded/optics.hpp>

namespace {

using hded::Shape;
using hded::Tensor;

Tensor<float> noise(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data_mut()) v = u(rng);
  return t;
}

// Args: channels, spatial size. 3x3 stride-1 conv, the dense-block shape.
void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1));
  const auto x = noise({4, c, n, n}, 1);
  const auto w = noise({c, c, 3, 3}, 2);
  const auto b = noise({c}, 3);
  hded::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(hded::conv2d(x, w, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * 4 * c * c * 9 * n * n);
}
BENCHMARK(BM_Conv2dForward)->Args({8, 64})->Args({32, 32})->Args({64, 16})->Unit(benchmark::kMicrosecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1));
  auto x = noise({4, c, n, n}, 1);
  auto w = noise({c, c, 3, 3}, 2);
  auto b = noise({c}, 3);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    const auto loss = hded::reduce_sum(hded::conv2d(x, w, b, 1, 1));
    hded::backward(loss);
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({8, 64})->Args({32, 32})->Unit(benchmark::kMicrosecond);

// Strided 4x4 upsampling used by the decoders.
void BM_ConvTranspose2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1));
  const auto x = noise({4, c, n, n}, 4);
  const auto w = noise({c, c / 2, 4, 4}, 5);
  hded::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(hded::conv_transpose2d(x, w, Tensor<float>{}, 2, 1));
}
BENCHMARK(BM_ConvTranspose2d)->Args({16, 16})->Args({64, 8})->Unit(benchmark::kMicrosecond);

void BM_Defocus(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto aif = noise({1, 3, n, n}, 6, 0.0f, 1.0f);
  const auto depth = noise({1, 1, n, n}, 7, 0.7f, 10.0f);
  const hded::ThinLensCamera cam;
  for (auto _ : state) benchmark::DoNotOptimize(hded::defocus_image(aif, depth, cam));
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_Defocus)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
