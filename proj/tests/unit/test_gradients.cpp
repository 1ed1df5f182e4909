// SPDX-License-Identifier: Apache-2.0
//
// Analytic gradients from the graph against central differences (h = 1e-3)
// of the double-precision oracle network.
#include <doctest.h>

#include <vector>

#include "../oracle.hpp"
#include "renofeat/attack.hpp"
#include "renofeat/graph.hpp"
#include "renofeat/kernels.hpp"
#include "renofeat/model.hpp"
#include "renofeat/transfer.hpp"

using namespace renofeat;
using oracle::D;

namespace {

constexpr double kStep = 1e-3;
constexpr double kTolerance = 1e-4;
constexpr double kAttackTolerance = 1e-3;

double fd_error(const Tensor& analytic, D& point, const std::function<double()>& f) {
  const std::vector<double> fd = oracle::finite_difference(f, point.v, kStep);
  return oracle::max_relative_error(analytic.values(), fd);
}

double total(const D& x) {
  double s = 0.0;
  for (double v : x.v) s += v;
  return s;
}

struct Instance {
  ModelSpec spec;
  ParamSet params;
  ParamSet teacher;
  Tensor input;
  std::vector<int> labels;
};

Instance make_instance(std::uint64_t seed) {
  Instance in;
  in.spec.stages = {{2, 3}, {1, 4}};
  in.spec.channels = 2;
  in.spec.height = in.spec.width = 8;
  in.spec.num_classes = 3;
  in.spec.seed = seed;
  in.params = build_model(in.spec);
  // Non-zero biases so that no bias gradient is trivially tested at zero.
  for (auto& t : in.params.backbone) {
    if (t.value.rank() == 1) t.value = oracle::random_tensor(t.value.shape(), seed * 31 + t.value.size(), -0.1, 0.1);
  }
  in.params.head[1].value = oracle::random_tensor(in.params.head[1].value.shape(), seed + 7, -0.2, 0.2);
  ModelSpec teacher_spec = in.spec;
  teacher_spec.seed = seed + 1000;
  in.teacher = build_model(teacher_spec);
  in.input = oracle::random_tensor({2, 2, 8, 8}, seed + 99, 0.0, 1.0);
  in.labels = {2, 0};
  return in;
}

std::vector<std::vector<double>> dropout_masks(const ModelSpec& spec, std::size_t batch, float rate,
                                               std::uint64_t seed) {
  std::vector<std::vector<double>> masks;
  if (rate == 0.0f) return masks;
  Rng rng(seed);
  for (const auto& stage : spec.stages) {
    const Tensor m = spatial_dropout_mask(batch, stage.width, rate, rng);
    masks.emplace_back(m.values().begin(), m.values().end());
  }
  return masks;
}

constexpr std::uint64_t kMaskSeed = 1234;
constexpr float kRates[] = {0.0f, 0.5f};

/// First seed at or after `seed` whose instance stays 1e-2 away from every
/// kink, with and without the dropout masks used below.
Instance kink_free(std::uint64_t seed) {
  for (;; ++seed) {
    Instance in = make_instance(seed);
    bool clear = true;
    for (float rate : kRates) {
      const auto masks = dropout_masks(in.spec, 2, rate, kMaskSeed);
      clear = clear && oracle::kink_margin(in.spec, oracle::to_d(in.params.backbone), D(in.input),
                                           masks.empty() ? nullptr : &masks) > 1e-2;
    }
    if (clear) return in;
  }
}

}  // namespace

TEST_SUITE("gradients") {

TEST_CASE("conv2d: gradient of sum(output) on a seeded 2x3x5x5 input") {
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, 11);
  const Tensor k = oracle::random_tensor({4, 3, 3, 3}, 12);
  const Tensor b = oracle::random_tensor({4}, 13);
  const Tensor y = kernels::conv2d_forward(x, k, b, 1, 1);
  Tensor gx, gk, gb;
  kernels::conv2d_backward(x, k, Tensor(y.shape(), 1.0f), 1, 1, &gx, &gk, &gb);

  D dx(x), dk(k), db(b);
  auto f = [&] { return total(oracle::conv2d(dx, dk, db, 1, 1)); };
  CHECK(fd_error(gk, dk, f) <= kTolerance);
  CHECK(fd_error(gx, dx, f) <= kTolerance);
  CHECK(fd_error(gb, db, f) <= kTolerance);
}

TEST_CASE("conv2d: strided, unpadded gradients through the graph") {
  Graph g;
  const NodeId x = g.leaf(oracle::random_tensor({2, 2, 7, 7}, 21), true);
  const NodeId k = g.leaf(oracle::random_tensor({3, 2, 3, 3}, 22), true);
  const NodeId b = g.leaf(oracle::random_tensor({3}, 23), true);
  const GradMap grads = g.backward(g.sum_squares(g.conv2d(x, k, b, 2, 0)));
  D dx(g.value(x)), dk(g.value(k)), db(g.value(b));
  auto f = [&] { return oracle::sum_squares(oracle::conv2d(dx, dk, db, 2, 0), D(Shape{2, 3, 3, 3})); };
  CHECK(fd_error(grads.at(x), dx, f) <= kTolerance);
  CHECK(fd_error(grads.at(k), dk, f) <= kTolerance);
  CHECK(fd_error(grads.at(b), db, f) <= kTolerance);
}

TEST_CASE("dense: seeded 4x8 -> 8x3 gradient check") {
  Graph g;
  const NodeId x = g.leaf(oracle::random_tensor({4, 8}, 31), true);
  const NodeId w = g.leaf(oracle::random_tensor({8, 3}, 32), true);
  const NodeId b = g.leaf(oracle::random_tensor({3}, 33), true);
  const Tensor target = oracle::random_tensor({4, 3}, 34);
  const GradMap grads = g.backward(g.sum_squares(g.dense(x, w, b), g.constant(target)));
  D dx(g.value(x)), dw(g.value(w)), db(g.value(b)), dt(target);
  auto f = [&] { return oracle::sum_squares(oracle::dense(dx, dw, db), dt); };
  CHECK(fd_error(grads.at(x), dx, f) <= kTolerance);
  CHECK(fd_error(grads.at(w), dw, f) <= kTolerance);
  CHECK(fd_error(grads.at(b), db, f) <= kTolerance);
}

TEST_CASE("max_pool2x2 and global_avg_pool gradient checks on distinct entries") {
  // A permutation of evenly spaced values keeps every window's maximum clear.
  std::vector<float> v(2 * 3 * 4 * 6);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05f * float((i * 37) % v.size());
  Graph g;
  const NodeId x = g.leaf(Tensor({2, 3, 4, 6}, v), true);
  const Tensor target = oracle::random_tensor({2, 3, 2, 3}, 41);
  const GradMap grads = g.backward(g.sum_squares(g.max_pool2x2(x), g.constant(target)));
  D dx(g.value(x)), dt(target);
  CHECK(fd_error(grads.at(x), dx, [&] { return oracle::sum_squares(oracle::max_pool(dx), dt); }) <= kTolerance);

  Graph h;
  const NodeId y = h.leaf(Tensor({2, 3, 4, 6}, v), true);
  const Tensor t2 = oracle::random_tensor({2, 3}, 42);
  const GradMap g2 = h.backward(h.sum_squares(h.global_avg_pool(y), h.constant(t2)));
  D dy(h.value(y)), dt2(t2);
  CHECK(fd_error(g2.at(y), dy, [&] { return oracle::sum_squares(oracle::gap(dy), dt2); }) <= kTolerance);
}

TEST_CASE("softmax cross entropy gradient check") {
  Graph g;
  const NodeId z = g.leaf(oracle::random_tensor({5, 4}, 51, -3.0, 3.0), true);
  const std::vector<int> labels = {0, 3, 1, 1, 2};
  const GradMap grads = g.backward(g.softmax_cross_entropy(z, labels));
  D dz(g.value(z));
  CHECK(fd_error(grads.at(z), dz, [&] { return oracle::cross_entropy(dz, labels); }) <= kTolerance);
}

TEST_CASE("composite conv -> relu -> dense -> cross entropy") {
  const std::vector<int> labels = {1, 2};
  Tensor x, k, b, w, c;
  for (std::uint64_t seed = 60;; seed += 5) {
    x = oracle::random_tensor({2, 3, 6, 6}, seed, 0.0, 1.0);
    k = oracle::random_tensor({4, 3, 3, 3}, seed + 1, -0.5, 0.5);
    b = oracle::random_tensor({4}, seed + 2, -0.1, 0.1);
    w = oracle::random_tensor({4, 3}, seed + 3);
    c = oracle::random_tensor({3}, seed + 4);
    double margin = 1e300;
    for (double v : oracle::conv2d(D(x), D(k), D(b), 1, 1).v) margin = std::min(margin, std::abs(v));
    if (margin > 1e-2) break;
  }
  Graph g;
  const NodeId nx = g.leaf(x, true), nk = g.leaf(k, true), nb = g.leaf(b, true), nw = g.leaf(w, true),
               nc = g.leaf(c, true);
  const NodeId loss =
      g.softmax_cross_entropy(g.dense(g.global_avg_pool(g.relu(g.conv2d(nx, nk, nb, 1, 1))), nw, nc), labels);
  const GradMap grads = g.backward(loss);

  D dx(x), dk(k), db(b), dw(w), dc(c);
  auto f = [&] {
    return oracle::cross_entropy(oracle::dense(oracle::gap(oracle::relu(oracle::conv2d(dx, dk, db, 1, 1))), dw, dc),
                                 labels);
  };
  CHECK(std::abs(g.value(loss).item() - f()) <= 1e-5 * std::abs(f()));
  CHECK(fd_error(grads.at(nk), dk, f) <= kTolerance);
  CHECK(fd_error(grads.at(nb), db, f) <= kTolerance);
  CHECK(fd_error(grads.at(nw), dw, f) <= kTolerance);
  CHECK(fd_error(grads.at(nc), dc, f) <= kTolerance);
  CHECK(fd_error(grads.at(nx), dx, f) <= kTolerance);
}

TEST_CASE("full transfer objective through the staged network") {
  const Instance in = kink_free(70);
  const double lambda_weight = 0.3, lambda_feat = 0.7, beta = 0.05;

  for (const float rate : kRates) {
    CAPTURE(rate);
    const DropoutPlan plan{rate, DropoutMode::kTrain};
    Rng graph_rng(kMaskSeed);

    Graph g;
    const ParamNodes student = add_params(g, in.params, true, true);
    const ParamNodes teacher = add_params(g, in.teacher, false, false);
    const NodeId input = g.constant(in.input);
    const ForwardNodes s = build_forward(g, in.spec, student, input, &plan, &graph_rng);
    const ForwardNodes t = build_forward(g, in.spec, teacher, input);
    NodeId loss = g.softmax_cross_entropy(s.logits, in.labels);
    loss = g.add(loss, l2sp_penalty(g, student.backbone, teacher.backbone, lambda_weight));
    loss = g.add(loss, feature_distill_penalty(g, s.stage_features, t.stage_features, lambda_feat));
    loss = g.add(loss, g.scale(g.add(g.sum_squares(student.head[0]), g.sum_squares(student.head[1])), beta));
    const GradMap grads = g.backward(loss);

    const auto masks = dropout_masks(in.spec, 2, rate, kMaskSeed);
    std::vector<D> theta = oracle::to_d(in.params.backbone), head = oracle::to_d(in.params.head);
    const std::vector<D> theta0 = oracle::to_d(in.teacher.backbone), head0 = oracle::to_d(in.teacher.head);
    const D x(in.input);
    const oracle::Forward reference = oracle::staged(in.spec, theta0, head0, x);
    auto f = [&] {
      const oracle::Forward out = oracle::staged(in.spec, theta, head, x, masks.empty() ? nullptr : &masks);
      double value = oracle::cross_entropy(out.logits, in.labels);
      for (std::size_t i = 0; i < theta.size(); ++i) value += lambda_weight * oracle::sum_squares(theta[i], theta0[i]);
      for (std::size_t l = 0; l < out.hooks.size(); ++l) {
        value += lambda_feat * oracle::sum_squares(out.hooks[l], reference.hooks[l]) / double(out.hooks[l].v.size());
      }
      for (const D& h : head) value += beta * oracle::sum_squares(h, D(h.shape));
      return value;
    };
    CHECK(std::abs(g.value(loss).item() - f()) <= 1e-5 * std::abs(f()));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      CAPTURE(in.params.backbone[i].name);
      CHECK(fd_error(grads.at(student.backbone[i]), theta[i], f) <= kTolerance);
    }
    for (std::size_t i = 0; i < head.size(); ++i) {
      CAPTURE(in.params.head[i].name);
      CHECK(fd_error(grads.at(student.head[i]), head[i], f) <= kTolerance);
    }
  }
}

TEST_CASE("attack objective gradient with respect to the image") {
  const Instance in = kink_free(80);
  const Tensor targets = one_hot_targets({1, 3}, in.spec.feature_dim(), 1000.0f);
  const ObjectiveEval eval = attack_objective(in.spec, in.params, in.input, targets);

  const std::vector<D> theta = oracle::to_d(in.params.backbone), head = oracle::to_d(in.params.head);
  D x(in.input);
  const D t(targets);
  auto f = [&] { return oracle::sum_squares(oracle::staged(in.spec, theta, head, x).penultimate, t); };
  CHECK((eval.values[0] + eval.values[1]) == doctest::Approx(f()).epsilon(1e-6));
  CHECK(fd_error(eval.grad, x, f) <= kAttackTolerance);
}

}  // TEST_SUITE
