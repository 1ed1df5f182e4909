// SPDX-License-Identifier: Apache-2.0
//
// Independent double-precision re-implementations of the layer maths, used as
// finite-difference oracles. Nothing here calls into the library's kernels or
// graph, so a shared bug cannot hide in both sides of a comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "renofeat/model.hpp"
#include "renofeat/tensor.hpp"

namespace oracle {

using renofeat::Shape;
using renofeat::Tensor;

struct D {
  Shape shape;
  std::vector<double> v;

  D() = default;
  explicit D(Shape s) : shape(std::move(s)), v(renofeat::element_count(shape), 0.0) {}
  explicit D(const Tensor& t) : shape(t.shape()), v(t.values().begin(), t.values().end()) {}
  std::size_t dim(std::size_t i) const { return shape.at(i); }
};

inline D conv2d(const D& x, const D& k, const D& b, int stride, int pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  D out({n, f, oh, ow});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = b.v[o];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long sy = static_cast<long>(y * stride + i) - pad;
                const long sx = static_cast<long>(xx * stride + j) - pad;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                s += x.v[((in * c + ch) * h + sy) * w + sx] * k.v[((o * c + ch) * kh + i) * kw + j];
              }
          out.v[((in * f + o) * oh + y) * ow + xx] = s;
        }
  return out;
}

inline D dense(const D& x, const D& w, const D& b) {
  const std::size_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
  D out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = b.v[j];
      for (std::size_t k = 0; k < d; ++k) s += x.v[i * d + k] * w.v[k * m + j];
      out.v[i * m + j] = s;
    }
  return out;
}

inline D relu(D x) {
  for (double& a : x.v) a = a > 0.0 ? a : 0.0;
  return x;
}

inline D max_pool(const D& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  D out({n, c, h / 2, w / 2});
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < h / 2; ++y)
      for (std::size_t xx = 0; xx < w / 2; ++xx) {
        double m = -1e300;
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 2; ++j) m = std::max(m, x.v[(p * h + 2 * y + i) * w + 2 * xx + j]);
        out.v[(p * (h / 2) + y) * (w / 2) + xx] = m;
      }
  return out;
}

inline D gap(const D& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  D out({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < area; ++i) s += x.v[p * area + i];
    out.v[p] = s / static_cast<double>(area);
  }
  return out;
}

inline double cross_entropy(const D& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double m = -1e300;
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, logits.v[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.v[i * k + j] - m);
    total += m + std::log(z) - logits.v[i * k + labels[i]];
  }
  return total / static_cast<double>(n);
}

inline double sum_squares(const D& a, const D& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
  return s;
}

struct Forward {
  std::vector<D> hooks;
  D penultimate;
  D logits;
};

/// The staged network: per stage, (3x3 conv pad 1 + relu) x convs, hook, 2x2 max pool.
inline Forward staged(const renofeat::ModelSpec& spec, const std::vector<D>& backbone,
                      const std::vector<D>& head, const D& input,
                      const std::vector<std::vector<double>>* masks = nullptr) {
  Forward out;
  D x = input;
  std::size_t p = 0;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    for (std::size_t k = 0; k < spec.stages[s].convs; ++k) {
      x = relu(conv2d(x, backbone[p], backbone[p + 1], 1, 1));
      p += 2;
    }
    if (masks != nullptr) {
      const std::size_t area = x.dim(2) * x.dim(3);
      for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] *= (*masks)[s][i / area];
    }
    out.hooks.push_back(x);
    x = max_pool(x);
  }
  out.penultimate = gap(x);
  out.logits = dense(out.penultimate, head[0], head[1]);
  return out;
}

/// Smallest distance of the staged network from a non-differentiable point on
/// `input`: the least |pre-activation| over every conv output and the least gap
/// between the largest and second largest entry of every pooling window.
inline double kink_margin(const renofeat::ModelSpec& spec, const std::vector<D>& backbone, const D& input,
                          const std::vector<std::vector<double>>* masks = nullptr) {
  double margin = 1e300;
  D x = input;
  std::size_t p = 0;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const auto& stage = spec.stages[s];
    for (std::size_t k = 0; k < stage.convs; ++k) {
      const D z = conv2d(x, backbone[p], backbone[p + 1], 1, 1);
      for (double v : z.v) margin = std::min(margin, std::abs(v));
      x = relu(z);
      p += 2;
    }
    const std::size_t h = x.dim(2), w = x.dim(3);
    if (masks != nullptr) {
      for (std::size_t i = 0; i < x.v.size(); ++i) x.v[i] *= (*masks)[s][i / (h * w)];
    }
    for (std::size_t plane = 0; plane < x.dim(0) * x.dim(1); ++plane)
      for (std::size_t y = 0; y < h; y += 2)
        for (std::size_t xx = 0; xx < w; xx += 2) {
          double win[4] = {x.v[(plane * h + y) * w + xx], x.v[(plane * h + y) * w + xx + 1],
                           x.v[(plane * h + y + 1) * w + xx], x.v[(plane * h + y + 1) * w + xx + 1]};
          std::sort(win, win + 4);
          if (win[3] > 0.0) margin = std::min(margin, win[3] - win[2]);
        }
    x = max_pool(x);
  }
  return margin;
}

inline std::vector<D> to_d(const std::vector<renofeat::NamedTensor>& tensors) {
  std::vector<D> out;
  for (const auto& t : tensors) out.emplace_back(t.value);
  return out;
}

/// Central differences of `f` with respect to every entry of `x`.
inline std::vector<double> finite_difference(const std::function<double()>& f, std::vector<double>& x,
                                             double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Largest elementwise relative error between an analytic gradient and the
/// oracle. Entries are compared relative to max(|analytic|, |oracle|), with a
/// floor of 1e-3 of the tensor's largest oracle magnitude so that entries that
/// are numerically zero do not divide by zero.
inline double max_relative_error(std::span<const float> analytic, const std::vector<double>& fd) {
  double scale = 0.0;
  for (double v : fd) scale = std::max(scale, std::abs(v));
  const double floor = std::max(1e-3 * scale, 1e-9);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(fd[i]), floor});
    worst = std::max(worst, std::abs(a - fd[i]) / denom);
  }
  return worst;
}

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (float& v : t.values()) v = static_cast<float>(u(rng));
  return t;
}

}  // namespace oracle
