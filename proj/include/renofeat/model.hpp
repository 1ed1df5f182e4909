// SPDX-License-Identifier: Apache-2.0
//
// Staged ConvNet: each stage is `convs` 3x3 conv+relu layers followed by a 2x2
// max pool; the output of the last conv+relu of every stage is a feature
// hook. After the last stage a global average pool produces the penultimate
// feature that feeds the linear head.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "renofeat/dropout.hpp"
#include "renofeat/graph.hpp"
#include "renofeat/rng.hpp"
#include "renofeat/tensor.hpp"

namespace renofeat {

struct StageSpec {
  std::size_t convs = 1;
  std::size_t width = 16;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct ModelSpec {
  std::vector<StageSpec> stages;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  /// Three stages of (2,16), (2,32), (2,64) on 3x32x32 inputs.
  static ModelSpec desk_default(std::size_t num_classes, std::uint64_t seed);

  /// Throws std::invalid_argument when the spec cannot describe a model with
  /// at least two hooked stages, even spatial sizes at every pool, and two or
  /// more classes.
  void validate() const;
  std::size_t feature_dim() const { return stages.empty() ? 0 : stages.back().width; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Learnable weights: the backbone (all conv layers) and the linear head.
struct ParamSet {
  std::vector<NamedTensor> backbone;
  std::vector<NamedTensor> head;  // head.weight [D, classes], head.bias [classes]

  std::size_t parameter_count() const;
  const Tensor* find(const std::string& name) const;
  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

struct TensorLayout {
  std::string name;
  Shape shape;
  bool head = false;
  std::size_t fan_in = 0;
  bool is_bias = false;
};

/// Names and shapes of every tensor the spec implies, backbone first then
/// head. Only the stage structure is consulted, so this also describes
/// single-stage specs that validate() rejects.
std::vector<TensorLayout> param_layout(const ModelSpec& spec);

/// He-normal weights (std sqrt(2 / fan_in)) and zero biases, seeded by spec.seed.
ParamSet build_model(const ModelSpec& spec);

/// Checks that `params` has exactly the tensors the spec implies. Throws
/// ShapeError naming the first offending tensor.
void check_layout(const ModelSpec& spec, const ParamSet& params);

/// Fresh head for `spec.num_classes`, drawn from a stream keyed by `seed`.
std::vector<NamedTensor> init_head(const ModelSpec& spec, std::uint64_t seed);

struct ForwardOutput {
  std::vector<Tensor> stage_features;  // post-relu (post-dropout when active) hook outputs
  Tensor penultimate;                  // [N, D]
  Tensor logits;                       // [N, classes]
};

struct ParamNodes {
  std::vector<NodeId> backbone;
  std::vector<NodeId> head;
};

struct ForwardNodes {
  std::vector<NodeId> stage_features;
  NodeId penultimate = 0;
  NodeId logits = 0;
};

ParamNodes add_params(Graph& graph, const ParamSet& params, bool train_backbone, bool train_head);

/// Records the forward pass on `graph`. With an active train-mode plan a
/// spatial dropout mask is applied to every hook output; the masked tensor is
/// both the recorded stage feature and the input to the following pool.
ForwardNodes build_forward(Graph& graph, const ModelSpec& spec, const ParamNodes& params,
                           NodeId input, const DropoutPlan* dropout = nullptr,
                           Rng* rng = nullptr);

/// Pure forward pass. Requires a batch of spec-shaped images with pixels in [0,1].
ForwardOutput forward(const ModelSpec& spec, const ParamSet& params, const Tensor& batch,
                      const DropoutPlan* dropout = nullptr, Rng* rng = nullptr);

}  // namespace renofeat
