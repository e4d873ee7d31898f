#include <random>

#include <benchmark/benchmark.h>

#include <hded/losses.hpp>
#include <hded/network.hpp>
#include <hded/optim.hpp>

namespace {

hded::ModelConfig micro_model() {
  hded::ModelConfig c;
  c.input_height = c.input_width = 64;
  c.width_scale = 0.125;
  return c;
}

hded::Tensor<float> batch(std::size_t n, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  hded::Tensor<float> t(hded::Shape{n, c, 64, 64});
  for (auto& v : t.data_mut()) v = u(rng);
  return t;
}

void BM_MicroForward(benchmark::State& state) {
  auto m = hded::Model<float>::build(micro_model(), 0);
  m.set_mode(hded::NormMode::eval);
  const auto x = batch(static_cast<std::size_t>(state.range(0)), 3, 1);
  hded::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(x));
}
BENCHMARK(BM_MicroForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

// One full-batch optimizer step of the micro preset, loss included.
void BM_MicroTrainStep(benchmark::State& state) {
  auto m = hded::Model<float>::build(micro_model(), 0);
  m.set_mode(hded::NormMode::train);
  const auto x = batch(8, 3, 1), aif = batch(8, 3, 2), depth = batch(8, 1, 3);
  auto params = m.parameters();
  for (auto _ : state) {
    const auto p = m.forward(x);
    const auto r = hded::total_loss<float>(&*p.depth, &depth, &*p.aif, &aif, hded::LossWeights{},
                                           hded::LossVariant::l1grad_charb_ssim);
    hded::backward(r.total);
    for (auto& q : params) q.tensor.zero_grad();
  }
}
BENCHMARK(BM_MicroTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
