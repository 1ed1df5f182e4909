// SPDX-License-Identifier: Apache-2.0
//
// Serial direct implementations. Kept deliberately naive: each output is a
// textbook sum accumulated in double.
#include <cstddef>

#include "renofeat/kernels.hpp"

namespace renofeat::kernels::reference {

namespace {

// Input value at padded coordinates, zero outside the image.
float at_padded(const float* plane, const ConvGeometry& g, std::size_t oy, std::size_t ox,
                std::size_t ky, std::size_t kx) {
  const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                 static_cast<std::ptrdiff_t>(g.padding);
  const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                 static_cast<std::ptrdiff_t>(g.padding);
  if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.height) ||
      x >= static_cast<std::ptrdiff_t>(g.width)) {
    return 0.0f;
  }
  return plane[static_cast<std::size_t>(y) * g.width + static_cast<std::size_t>(x)];
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                      int padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), bias.shape(), stride, padding);
  Tensor out({g.batch, g.filters, g.out_h, g.out_w});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double acc = bias[f];
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            const float* plane = input.data() + (n * g.in_channels + c) * g.height * g.width;
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const float wv =
                    kernel[((f * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                acc += static_cast<double>(wv) * at_padded(plane, g, oy, ox, ky, kx);
              }
            }
          }
          out[((n * g.filters + f) * g.out_h + oy) * g.out_w + ox] = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                     int padding, Tensor* grad_input, Tensor* grad_kernel, Tensor* grad_bias) {
  const ConvGeometry g =
      conv_geometry(input.shape(), kernel.shape(), Shape{kernel.dim(0)}, stride, padding);
  if (grad_out.shape() != Shape{g.batch, g.filters, g.out_h, g.out_w}) {
    throw ShapeError("conv2d backward: gradient shape mismatch");
  }
  std::vector<double> di(grad_input ? input.size() : 0, 0.0);
  std::vector<double> dw(grad_kernel ? kernel.size() : 0, 0.0);
  std::vector<double> db(grad_bias ? g.filters : 0, 0.0);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          const double go = grad_out[((n * g.filters + f) * g.out_h + oy) * g.out_w + ox];
          if (grad_bias) db[f] += go;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                               static_cast<std::ptrdiff_t>(g.padding);
                const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                               static_cast<std::ptrdiff_t>(g.padding);
                if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.height) ||
                    x >= static_cast<std::ptrdiff_t>(g.width)) {
                  continue;
                }
                const std::size_t in_idx = ((n * g.in_channels + c) * g.height +
                                            static_cast<std::size_t>(y)) * g.width +
                                           static_cast<std::size_t>(x);
                const std::size_t w_idx = ((f * g.in_channels + c) * g.kernel_h + ky) *
                                              g.kernel_w + kx;
                if (grad_input) di[in_idx] += go * kernel[w_idx];
                if (grad_kernel) dw[w_idx] += go * input[in_idx];
              }
            }
          }
        }
      }
    }
  }
  const auto store = [](const std::vector<double>& src, Tensor& dst) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(src[i]);
  };
  if (grad_input) {
    *grad_input = Tensor(input.shape());
    store(di, *grad_input);
  }
  if (grad_kernel) {
    *grad_kernel = Tensor(kernel.shape());
    store(dw, *grad_kernel);
  }
  if (grad_bias) {
    *grad_bias = Tensor({g.filters});
    store(db, *grad_bias);
  }
}

Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 ||
      input.dim(1) != weight.dim(0) || weight.dim(1) != bias.dim(0)) {
    throw ShapeError("dense: inner dimensions disagree");
  }
  const std::size_t rows = input.dim(0), inner = input.dim(1), cols = weight.dim(1);
  Tensor out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t m = 0; m < cols; ++m) {
      double acc = bias[m];
      for (std::size_t d = 0; d < inner; ++d) {
        acc += static_cast<double>(input[r * inner + d]) * weight[d * cols + m];
      }
      out[r * cols + m] = static_cast<float>(acc);
    }
  }
  return out;
}

void dense_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                    Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) {
  const std::size_t rows = input.dim(0), inner = input.dim(1), cols = weight.dim(1);
  if (grad_input) {
    *grad_input = Tensor(input.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t d = 0; d < inner; ++d) {
        double acc = 0.0;
        for (std::size_t m = 0; m < cols; ++m) {
          acc += static_cast<double>(grad_out[r * cols + m]) * weight[d * cols + m];
        }
        (*grad_input)[r * inner + d] = static_cast<float>(acc);
      }
    }
  }
  if (grad_weight) {
    *grad_weight = Tensor(weight.shape());
    for (std::size_t d = 0; d < inner; ++d) {
      for (std::size_t m = 0; m < cols; ++m) {
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          acc += static_cast<double>(input[r * inner + d]) * grad_out[r * cols + m];
        }
        (*grad_weight)[d * cols + m] = static_cast<float>(acc);
      }
    }
  }
  if (grad_bias) {
    *grad_bias = Tensor({cols});
    for (std::size_t m = 0; m < cols; ++m) {
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += grad_out[r * cols + m];
      (*grad_bias)[m] = static_cast<float>(acc);
    }
  }
}

Tensor max_pool2x2_forward(const Tensor& input, std::vector<std::uint32_t>& argmax) {
  if (input.rank() != 4 || input.dim(2) % 2 != 0 || input.dim(3) % 2 != 0) {
    throw ShapeError("max_pool2x2: spatial dimensions must be even");
  }
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor out({n, c, h / 2, w / 2});
  argmax.assign(out.size(), 0);
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t y = 0; y < h / 2; ++y) {
      for (std::size_t x = 0; x < w / 2; ++x, ++o) {
        std::size_t best = 0;
        bool first = true;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (p * h + 2 * y + dy) * w + 2 * x + dx;
            if (first || input[idx] > input[best]) best = idx;
            first = false;
          }
        }
        out[o] = input[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

Tensor global_avg_pool_forward(const Tensor& input) {
  if (input.rank() != 4) throw ShapeError("global_avg_pool: input must be [N,C,H,W]");
  const std::size_t area = input.dim(2) * input.dim(3);
  Tensor out({input.dim(0), input.dim(1)});
  for (std::size_t p = 0; p < out.size(); ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += input[p * area + i];
    out[p] = static_cast<float>(acc / static_cast<double>(area));
  }
  return out;
}

}  // namespace renofeat::kernels::reference
