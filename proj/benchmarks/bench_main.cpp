// Microbenchmarks for the hot paths: convolution, the full U-Net forward
// pass, a training step, and the contrastive loss.

#include <benchmark/benchmark.h>

#include "retseg/moco.hpp"
#include "retseg/nn.hpp"
#include "retseg/unet.hpp"

using namespace retseg;

namespace {

Tensor rand_tensor(const std::vector<int>& shape, RngStream& rng) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

void bm_conv2d_forward(benchmark::State& state) {
  RngStream rng(1);
  Tensor x = rand_tensor({1, 16, 64, 64}, rng);
  Tensor w = rand_tensor({16, 16, 3, 3}, rng);
  Tensor b = rand_tensor({16}, rng);
  for (auto _ : state) {
    Tensor y = conv2d<float>(nullptr, x, w, b, 1, Pad::Same);
    benchmark::DoNotOptimize(y.data().data());
  }
}

void bm_conv2d_train_step(benchmark::State& state) {
  RngStream rng(2);
  Tensor x = rand_tensor({1, 16, 64, 64}, rng);
  Tensor w = rand_tensor({16, 16, 3, 3}, rng);
  Tensor b = rand_tensor({16}, rng);
  Tensor rw = rand_tensor({1, 16, 64, 64}, rng);
  for (auto _ : state) {
    FloatTape tape;
    Tensor loss = sum(&tape, mul(&tape, conv2d(&tape, x, w, b, 1, Pad::Same), rw));
    backward(loss);
    benchmark::DoNotOptimize(w.grad().data());
  }
}

void bm_unet_forward(benchmark::State& state) {
  UNetConfig cfg;
  cfg.encoder_levels = static_cast<int>(state.range(0));
  cfg.base_filters = 8;
  RngStream rng(3);
  UNetModel model = build_unet(cfg, rng);
  Tensor x = rand_tensor({1, 3, 128, 128}, rng);
  for (auto _ : state) {
    Tensor y = forward(model, x, Mode::Eval, static_cast<FloatTape*>(nullptr));
    benchmark::DoNotOptimize(y.data().data());
  }
}

void bm_info_nce(benchmark::State& state) {
  RngStream rng(4);
  const int d = 32;
  Tensor q = l2_normalize<float>(nullptr, rand_tensor({16, d}, rng));
  Tensor k = l2_normalize<float>(nullptr, rand_tensor({16, d}, rng));
  Tensor queue = l2_normalize<float>(nullptr, rand_tensor({static_cast<int>(state.range(0)), d}, rng));
  for (auto _ : state) {
    FloatTape tape;
    Tensor loss = info_nce(&tape, q, k, queue, 0.07f);
    backward(loss);
    benchmark::DoNotOptimize(q.grad().data());
  }
}

}  // namespace

BENCHMARK(bm_conv2d_forward)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_conv2d_train_step)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_unet_forward)->Arg(3)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_info_nce)->Arg(256)->Arg(4096)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
