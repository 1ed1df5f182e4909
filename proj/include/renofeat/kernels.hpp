// SPDX-License-Identifier: Apache-2.0
//
// Layer kernels. The functions in `renofeat::kernels` are the OpenMP paths
// used by the autodiff graph; `renofeat::kernels::reference` holds the serial
// direct implementations they are tested against.
//
// Every parallel loop assigns each output element to exactly one thread and
// accumulates in a fixed order, so results do not depend on the thread count.
#pragma once

#include <cstdint>
#include <vector>

#include "renofeat/tensor.hpp"

namespace renofeat::kernels {

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t filters, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;
};

/// Validates input [N,C,H,W] against kernel [F,C,kh,kw] and derives output size.
ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, const Shape& bias,
                           int stride, int padding);

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                      int padding);
/// Any of the gradient outputs may be null to skip that gradient.
void conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                     int padding, Tensor* grad_input, Tensor* grad_kernel, Tensor* grad_bias);

Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias);
void dense_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                    Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias);

/// 2x2 stride-2 max pool; `argmax` receives the flat input index per output.
Tensor max_pool2x2_forward(const Tensor& input, std::vector<std::uint32_t>& argmax);
Tensor max_pool2x2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                            const Tensor& grad_out);

/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool_forward(const Tensor& input);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_out);

/// Threads used by the parallel kernels (0 keeps the OpenMP default).
void set_num_threads(int threads);
int num_threads();

namespace reference {

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                      int padding);
void conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                     int padding, Tensor* grad_input, Tensor* grad_kernel, Tensor* grad_bias);
Tensor dense_forward(const Tensor& input, const Tensor& weight, const Tensor& bias);
void dense_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                    Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias);
Tensor max_pool2x2_forward(const Tensor& input, std::vector<std::uint32_t>& argmax);
Tensor global_avg_pool_forward(const Tensor& input);

}  // namespace reference

}  // namespace renofeat::kernels
