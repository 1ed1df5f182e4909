// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <vector>

#include "renofeat/tensor.hpp"

namespace renofeat {

using NodeId = std::size_t;

/// Gradients keyed by trainable leaf id. Shapes equal the leaf shapes.
using GradMap = std::map<NodeId, Tensor>;

enum class OpKind : std::uint8_t {
  kLeaf,
  kConv2d,
  kDense,
  kRelu,
  kGlobalAvgPool,
  kMaxPool2x2,
  kSoftmaxCrossEntropy,
  kSumSquares,
  kAdd,
  kScale,
  kChannelMask,
};

/// Forward tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order and only reference earlier nodes, so
/// the tape is topologically sorted by construction. Values are computed
/// eagerly when a node is added and never change afterwards; references
/// returned by value() stay valid for the lifetime of the graph.
class Graph {
 public:
  /// A leaf holding `value`. Trainable leaves receive entries in backward().
  NodeId leaf(Tensor value, bool trainable);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, int stride, int padding);
  NodeId dense(NodeId input, NodeId weight, NodeId bias);
  NodeId relu(NodeId input);
  NodeId global_avg_pool(NodeId input);
  NodeId max_pool2x2(NodeId input);
  /// Mean over the batch of -log softmax(logits)[label]. Scalar output.
  NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels);
  /// Sum of (a - b)^2. Scalar output.
  NodeId sum_squares(NodeId a, NodeId b);
  /// Sum of a^2. Scalar output.
  NodeId sum_squares(NodeId a);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// Multiplies each [n, c] plane of a [N,C,H,W] input by `mask[n, c]`.
  NodeId channel_mask(NodeId input, Tensor mask);

  const Tensor& value(NodeId id) const;
  OpKind kind(NodeId id) const;
  std::span<const NodeId> inputs(NodeId id) const;
  bool is_trainable_leaf(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode gradients of a scalar node with respect to every trainable
  /// leaf. Leaves the loss does not depend on get zero gradients.
  GradMap backward(NodeId loss) const;

 private:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<NodeId> inputs;
    Tensor value;
    bool trainable = false;
    bool needs_grad = false;
    int stride = 1;
    int padding = 0;
    double factor = 1.0;
    std::vector<std::uint32_t> indices;  // pool argmax or labels
    Tensor aux;                          // softmax probabilities or channel mask
  };

  const Node& node(NodeId id) const;
  NodeId push(Node node);
  bool any_needs_grad(std::initializer_list<NodeId> ids) const;

  std::deque<Node> nodes_;  // deque: value() references survive later insertions
};

}  // namespace renofeat
