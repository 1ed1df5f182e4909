// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels against the OpenMP kernels on the layer shapes of
// the default network (32-image batches, 16x16 inputs, widths 16/32/64).

#include <benchmark/benchmark.h>

#include <random>

#include "renofeat/kernels.hpp"

namespace {

using renofeat::Shape;
using renofeat::Tensor;
namespace k = renofeat::kernels;

Tensor random(Shape shape, unsigned seed) {
  Tensor t(std::move(shape));
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (float& v : t.values()) v = u(rng);
  return t;
}

struct ConvCase {
  std::size_t channels, size, filters;
};

// Indexed by benchmark argument: first, middle and last stage.
constexpr ConvCase kConv[] = {{3, 16, 16}, {16, 8, 32}, {32, 4, 64}};
constexpr std::size_t kBatch = 32;

template <bool Reference>
void BM_ConvForward(benchmark::State& state) {
  const ConvCase c = kConv[state.range(0)];
  const Tensor x = random({kBatch, c.channels, c.size, c.size}, 1);
  const Tensor w = random({c.filters, c.channels, 3, 3}, 2);
  const Tensor b = random({c.filters}, 3);
  for (auto _ : state) {
    Tensor y = Reference ? k::reference::conv2d_forward(x, w, b, 1, 1) : k::conv2d_forward(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * kBatch);
}

template <bool Reference>
void BM_ConvBackward(benchmark::State& state) {
  const ConvCase c = kConv[state.range(0)];
  const Tensor x = random({kBatch, c.channels, c.size, c.size}, 1);
  const Tensor w = random({c.filters, c.channels, 3, 3}, 2);
  const Tensor gy = random({kBatch, c.filters, c.size, c.size}, 4);
  Tensor gx, gw, gb;
  for (auto _ : state) {
    if (Reference) {
      k::reference::conv2d_backward(x, w, gy, 1, 1, &gx, &gw, &gb);
    } else {
      k::conv2d_backward(x, w, gy, 1, 1, &gx, &gw, &gb);
    }
    benchmark::DoNotOptimize(gx.data());
    benchmark::DoNotOptimize(gw.data());
  }
  state.SetItemsProcessed(state.iterations() * kBatch);
}

template <bool Reference>
void BM_Dense(benchmark::State& state) {
  const Tensor x = random({kBatch, 64}, 1);
  const Tensor w = random({64, 6}, 2);
  const Tensor b = random({6}, 3);
  for (auto _ : state) {
    Tensor y = Reference ? k::reference::dense_forward(x, w, b) : k::dense_forward(x, w, b);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Reference>
void BM_MaxPool(benchmark::State& state) {
  const Tensor x = random({kBatch, 16, 16, 16}, 1);
  std::vector<std::uint32_t> argmax;
  for (auto _ : state) {
    Tensor y = Reference ? k::reference::max_pool2x2_forward(x, argmax) : k::max_pool2x2_forward(x, argmax);
    benchmark::DoNotOptimize(y.data());
  }
}

BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/reference")->DenseRange(0, 2);
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/openmp")->DenseRange(0, 2);
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/reference")->DenseRange(0, 2);
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/openmp")->DenseRange(0, 2);
BENCHMARK(BM_Dense<true>)->Name("dense_forward/reference");
BENCHMARK(BM_Dense<false>)->Name("dense_forward/openmp");
BENCHMARK(BM_MaxPool<true>)->Name("max_pool/reference");
BENCHMARK(BM_MaxPool<false>)->Name("max_pool/openmp");

}  // namespace

BENCHMARK_MAIN();
