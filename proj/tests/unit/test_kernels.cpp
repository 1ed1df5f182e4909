// SPDX-License-Identifier: Apache-2.0
//
// The blocked OpenMP kernels against the serial direct reference.
#include <doctest.h>

#include <cmath>

#include "../oracle.hpp"
#include "renofeat/kernels.hpp"

using namespace renofeat;

namespace {

double max_rel(const Tensor& fast, const Tensor& ref) {
  REQUIRE(fast.shape() == ref.shape());
  double scale = 0.0;
  for (float v : ref.values()) scale = std::max(scale, double(std::abs(v)));
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    worst = std::max(worst, std::abs(double(fast[i]) - ref[i]) / std::max(scale, 1e-30));
  }
  return worst;
}

struct ConvCase {
  Shape input, kernel;
  int stride, padding;
};

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("conv2d fast path matches the direct reference within 1e-5") {
  const ConvCase cases[] = {
      {{2, 3, 8, 8}, {5, 3, 3, 3}, 1, 1},    {{1, 16, 16, 16}, {32, 16, 3, 3}, 1, 1},
      {{3, 7, 9, 11}, {6, 7, 3, 3}, 2, 1},   {{2, 4, 6, 6}, {3, 4, 1, 1}, 1, 0},
      {{64, 3, 16, 16}, {16, 3, 3, 3}, 1, 1}, {{5, 2, 5, 7}, {9, 2, 2, 3}, 1, 2},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    CAPTURE(to_string(c.input));
    const Tensor x = oracle::random_tensor(c.input, seed++, 0.0, 1.0);
    const Tensor k = oracle::random_tensor(c.kernel, seed++);
    const Tensor b = oracle::random_tensor({c.kernel[0]}, seed++);
    const Tensor y = kernels::conv2d_forward(x, k, b, c.stride, c.padding);
    CHECK(max_rel(y, kernels::reference::conv2d_forward(x, k, b, c.stride, c.padding)) <= 1e-5);

    const Tensor gy = oracle::random_tensor(y.shape(), seed++);
    Tensor gx, gk, gb, rx, rk, rb;
    kernels::conv2d_backward(x, k, gy, c.stride, c.padding, &gx, &gk, &gb);
    kernels::reference::conv2d_backward(x, k, gy, c.stride, c.padding, &rx, &rk, &rb);
    CHECK(max_rel(gx, rx) <= 1e-5);
    CHECK(max_rel(gk, rk) <= 1e-5);
    CHECK(max_rel(gb, rb) <= 1e-5);
  }
}

TEST_CASE("conv2d backward honours null outputs") {
  const Tensor x = oracle::random_tensor({1, 2, 4, 4}, 1);
  const Tensor k = oracle::random_tensor({3, 2, 3, 3}, 2);
  const Tensor gy = oracle::random_tensor({1, 3, 4, 4}, 3);
  Tensor gk;
  CHECK_NOTHROW(kernels::conv2d_backward(x, k, gy, 1, 1, nullptr, &gk, nullptr));
  Tensor rk;
  kernels::reference::conv2d_backward(x, k, gy, 1, 1, nullptr, &rk, nullptr);
  CHECK(max_rel(gk, rk) <= 1e-5);
}

TEST_CASE("dense, pooling kernels match the reference") {
  const Tensor x = oracle::random_tensor({17, 33}, 7);
  const Tensor w = oracle::random_tensor({33, 5}, 8);
  const Tensor b = oracle::random_tensor({5}, 9);
  CHECK(max_rel(kernels::dense_forward(x, w, b), kernels::reference::dense_forward(x, w, b)) <= 1e-5);
  const Tensor gy = oracle::random_tensor({17, 5}, 10);
  Tensor gx, gw, gb, rx, rw, rb;
  kernels::dense_backward(x, w, gy, &gx, &gw, &gb);
  kernels::reference::dense_backward(x, w, gy, &rx, &rw, &rb);
  CHECK(max_rel(gx, rx) <= 1e-5);
  CHECK(max_rel(gw, rw) <= 1e-5);
  CHECK(max_rel(gb, rb) <= 1e-5);

  const Tensor img = oracle::random_tensor({3, 4, 6, 8}, 11);
  std::vector<std::uint32_t> a1, a2;
  CHECK(kernels::max_pool2x2_forward(img, a1) == kernels::reference::max_pool2x2_forward(img, a2));
  CHECK(a1 == a2);
  CHECK(max_rel(kernels::global_avg_pool_forward(img), kernels::reference::global_avg_pool_forward(img)) <= 1e-6);
}

TEST_CASE("kernel outputs do not depend on the thread count") {
  const Tensor x = oracle::random_tensor({8, 8, 12, 12}, 21);
  const Tensor k = oracle::random_tensor({16, 8, 3, 3}, 22);
  const Tensor b = oracle::random_tensor({16}, 23);
  const Tensor gy = oracle::random_tensor({8, 16, 12, 12}, 24);
  const int before = kernels::num_threads();
  auto run = [&](int threads) {
    kernels::set_num_threads(threads);
    Tensor gx, gk, gb;
    Tensor y = kernels::conv2d_forward(x, k, b, 1, 1);
    kernels::conv2d_backward(x, k, gy, 1, 1, &gx, &gk, &gb);
    return std::vector<Tensor>{y, gx, gk, gb};
  };
  const auto one = run(1);
  const auto three = run(3);
  kernels::set_num_threads(before);
  CHECK(one == three);
}

}  // TEST_SUITE
