// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "renofeat/rng.hpp"
#include "renofeat/tensor.hpp"

namespace renofeat {

enum class DropoutMode { kTrain, kEval };

/// Spatial dropout inserted after every feature-distillation hook.
struct DropoutPlan {
  float rate = 0.0f;
  DropoutMode mode = DropoutMode::kTrain;

  bool active() const { return mode == DropoutMode::kTrain && rate > 0.0f; }
};

/// Per-(sample, channel) multipliers: 0 with probability `rate`, otherwise
/// 1 / (1 - rate). Throws std::invalid_argument unless 0 <= rate < 1.
Tensor spatial_dropout_mask(std::size_t batch, std::size_t channels, float rate, Rng& rng);

/// Applies spatial dropout to [N,C,H,W] features. Eval mode is the identity.
Tensor spatial_dropout(const Tensor& features, float rate, DropoutMode mode, Rng& rng);

}  // namespace renofeat
