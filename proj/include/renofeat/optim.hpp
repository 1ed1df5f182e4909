// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "renofeat/tensor.hpp"

namespace renofeat {

struct SgdOptions {
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;

  /// Throws std::invalid_argument unless lr > 0, 0 <= momentum < 1, weight_decay >= 0.
  void validate() const;
};

/// Momentum SGD with L2 weight decay folded into the step:
///   v <- momentum * v + (grad + weight_decay * param)
///   param <- param - lr * v
void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, const SgdOptions& options);

}  // namespace renofeat
