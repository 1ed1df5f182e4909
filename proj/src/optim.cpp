// SPDX-License-Identifier: Apache-2.0
#include "renofeat/optim.hpp"

#include <stdexcept>

namespace renofeat {

void SgdOptions::validate() const {
  if (!(lr > 0.0f)) throw std::invalid_argument("sgd: learning rate must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) {
    throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0f)) throw std::invalid_argument("sgd: weight decay must be >= 0");
}

void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, const SgdOptions& options) {
  options.validate();
  require_same_shape(param, grad, "sgd_step gradient");
  require_same_shape(param, velocity, "sgd_step velocity");
  float* p = param.data();
  float* v = velocity.data();
  const float* g = grad.data();
  for (std::size_t i = 0; i < param.size(); ++i) {
    v[i] = options.momentum * v[i] + (g[i] + options.weight_decay * p[i]);
    p[i] -= options.lr * v[i];
  }
}

}  // namespace renofeat
