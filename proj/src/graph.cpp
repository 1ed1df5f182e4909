// SPDX-License-Identifier: Apache-2.0
#include "renofeat/graph.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

#include "renofeat/kernels.hpp"

namespace renofeat {

namespace {

void accumulate(std::optional<Tensor>& slot, Tensor grad) {
  if (!slot) {
    slot = std::move(grad);
    return;
  }
  float* dst = slot->data();
  const float* src = grad.data();
  for (std::size_t i = 0; i < slot->size(); ++i) dst[i] += src[i];
}

Tensor scaled(const Tensor& t, float factor) {
  Tensor out = t;
  for (float& v : out.values()) v *= factor;
  return out;
}

}  // namespace

const Graph::Node& Graph::node(NodeId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("graph node id " + std::to_string(id));
  return nodes_[id];
}

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

bool Graph::any_needs_grad(std::initializer_list<NodeId> ids) const {
  return std::any_of(ids.begin(), ids.end(), [&](NodeId i) { return node(i).needs_grad; });
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }
OpKind Graph::kind(NodeId id) const { return node(id).op; }
std::span<const NodeId> Graph::inputs(NodeId id) const { return node(id).inputs; }
bool Graph::is_trainable_leaf(NodeId id) const {
  const Node& n = node(id);
  return n.op == OpKind::kLeaf && n.trainable;
}

NodeId Graph::leaf(Tensor value, bool trainable) {
  Node n;
  n.value = std::move(value);
  n.trainable = trainable;
  n.needs_grad = trainable;
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId input, NodeId kernel, NodeId bias, int stride, int padding) {
  Node n;
  n.op = OpKind::kConv2d;
  n.value = kernels::conv2d_forward(value(input), value(kernel), value(bias), stride, padding);
  n.inputs = {input, kernel, bias};
  n.stride = stride;
  n.padding = padding;
  n.needs_grad = any_needs_grad({input, kernel, bias});
  return push(std::move(n));
}

NodeId Graph::dense(NodeId input, NodeId weight, NodeId bias) {
  Node n;
  n.op = OpKind::kDense;
  n.value = kernels::dense_forward(value(input), value(weight), value(bias));
  n.inputs = {input, weight, bias};
  n.needs_grad = any_needs_grad({input, weight, bias});
  return push(std::move(n));
}

NodeId Graph::relu(NodeId input) {
  Node n;
  n.op = OpKind::kRelu;
  n.value = value(input);
  for (float& v : n.value.values()) v = v > 0.0f ? v : 0.0f;
  n.inputs = {input};
  n.needs_grad = node(input).needs_grad;
  return push(std::move(n));
}

NodeId Graph::global_avg_pool(NodeId input) {
  Node n;
  n.op = OpKind::kGlobalAvgPool;
  n.value = kernels::global_avg_pool_forward(value(input));
  n.inputs = {input};
  n.needs_grad = node(input).needs_grad;
  return push(std::move(n));
}

NodeId Graph::max_pool2x2(NodeId input) {
  Node n;
  n.op = OpKind::kMaxPool2x2;
  n.value = kernels::max_pool2x2_forward(value(input), n.indices);
  n.inputs = {input};
  n.needs_grad = node(input).needs_grad;
  return push(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::span<const int> labels) {
  const Tensor& z = value(logits);
  if (z.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,C]");
  const std::size_t rows = z.dim(0), classes = z.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  Node n;
  n.op = OpKind::kSoftmaxCrossEntropy;
  n.aux = Tensor(z.shape());
  n.indices.resize(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
    const float* row = z.data() + r * classes;
    const double peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(row[c]) - peak);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) {
      n.aux[r * classes + c] =
          static_cast<float>(std::exp(static_cast<double>(row[c]) - peak - log_denom));
    }
    total += log_denom - (static_cast<double>(row[label]) - peak);
    n.indices[r] = static_cast<std::uint32_t>(label);
  }
  n.value = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  n.inputs = {logits};
  n.needs_grad = node(logits).needs_grad;
  return push(std::move(n));
}

NodeId Graph::sum_squares(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "sum_squares");
  Node n;
  n.op = OpKind::kSumSquares;
  n.value = Tensor::scalar(static_cast<float>(squared_distance(value(a).values(), value(b).values())));
  n.inputs = {a, b};
  n.needs_grad = any_needs_grad({a, b});
  return push(std::move(n));
}

NodeId Graph::sum_squares(NodeId a) {
  Node n;
  n.op = OpKind::kSumSquares;
  double acc = 0.0;
  for (float v : value(a).values()) acc += static_cast<double>(v) * v;
  n.value = Tensor::scalar(static_cast<float>(acc));
  n.inputs = {a};
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "add");
  Node n;
  n.op = OpKind::kAdd;
  n.value = value(a);
  const float* src = value(b).data();
  float* dst = n.value.data();
  for (std::size_t i = 0; i < n.value.size(); ++i) dst[i] += src[i];
  n.inputs = {a, b};
  n.needs_grad = any_needs_grad({a, b});
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
  Node n;
  n.op = OpKind::kScale;
  n.value = value(a);
  for (float& v : n.value.values()) v = static_cast<float>(v * factor);
  n.factor = factor;
  n.inputs = {a};
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

NodeId Graph::channel_mask(NodeId input, Tensor mask) {
  const Tensor& x = value(input);
  if (x.rank() != 4 || mask.shape() != Shape{x.dim(0), x.dim(1)}) {
    throw ShapeError("channel_mask: mask " + to_string(mask.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  Node n;
  n.op = OpKind::kChannelMask;
  n.value = x;
  const std::size_t area = x.dim(2) * x.dim(3);
  for (std::size_t p = 0; p < mask.size(); ++p) {
    float* plane = n.value.data() + p * area;
    for (std::size_t i = 0; i < area; ++i) plane[i] *= mask[p];
  }
  n.aux = std::move(mask);
  n.inputs = {input};
  n.needs_grad = node(input).needs_grad;
  return push(std::move(n));
}

GradMap Graph::backward(NodeId loss) const {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(root.value.shape()));
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[loss] = Tensor::scalar(1.0f);

  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.needs_grad || !grads[id] || n.op == OpKind::kLeaf) continue;
    const Tensor& g = *grads[id];
    const auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
    const auto send = [&](std::size_t k, Tensor t) { accumulate(grads[n.inputs[k]], std::move(t)); };

    switch (n.op) {
      case OpKind::kConv2d: {
        Tensor gi, gk, gb;
        kernels::conv2d_backward(value(n.inputs[0]), value(n.inputs[1]), g, n.stride, n.padding,
                                 wants(0) ? &gi : nullptr, wants(1) ? &gk : nullptr,
                                 wants(2) ? &gb : nullptr);
        if (wants(0)) send(0, std::move(gi));
        if (wants(1)) send(1, std::move(gk));
        if (wants(2)) send(2, std::move(gb));
        break;
      }
      case OpKind::kDense: {
        Tensor gi, gw, gb;
        kernels::dense_backward(value(n.inputs[0]), value(n.inputs[1]), g,
                                wants(0) ? &gi : nullptr, wants(1) ? &gw : nullptr,
                                wants(2) ? &gb : nullptr);
        if (wants(0)) send(0, std::move(gi));
        if (wants(1)) send(1, std::move(gw));
        if (wants(2)) send(2, std::move(gb));
        break;
      }
      case OpKind::kRelu: {
        Tensor gi = g;
        for (std::size_t i = 0; i < gi.size(); ++i) {
          if (!(n.value[i] > 0.0f)) gi[i] = 0.0f;
        }
        send(0, std::move(gi));
        break;
      }
      case OpKind::kGlobalAvgPool:
        send(0, kernels::global_avg_pool_backward(value(n.inputs[0]).shape(), g));
        break;
      case OpKind::kMaxPool2x2:
        send(0, kernels::max_pool2x2_backward(value(n.inputs[0]).shape(), n.indices, g));
        break;
      case OpKind::kSoftmaxCrossEntropy: {
        const std::size_t rows = n.aux.dim(0), classes = n.aux.dim(1);
        const float factor = g.item() / static_cast<float>(rows);
        Tensor gi = n.aux;
        for (std::size_t r = 0; r < rows; ++r) gi[r * classes + n.indices[r]] -= 1.0f;
        for (float& v : gi.values()) v *= factor;
        send(0, std::move(gi));
        break;
      }
      case OpKind::kSumSquares: {
        const Tensor& a = value(n.inputs[0]);
        Tensor diff = a;
        if (n.inputs.size() == 2) {
          const float* b = value(n.inputs[1]).data();
          for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= b[i];
        }
        const float factor = 2.0f * g.item();
        for (float& v : diff.values()) v *= factor;
        if (n.inputs.size() == 2 && wants(1)) send(1, scaled(diff, -1.0f));
        if (wants(0)) send(0, std::move(diff));
        break;
      }
      case OpKind::kAdd:
        if (wants(0)) send(0, g);
        if (wants(1)) send(1, g);
        break;
      case OpKind::kScale:
        send(0, scaled(g, static_cast<float>(n.factor)));
        break;
      case OpKind::kChannelMask: {
        Tensor gi = g;
        const std::size_t area = gi.dim(2) * gi.dim(3);
        for (std::size_t p = 0; p < n.aux.size(); ++p) {
          float* plane = gi.data() + p * area;
          for (std::size_t i = 0; i < area; ++i) plane[i] *= n.aux[p];
        }
        send(0, std::move(gi));
        break;
      }
      case OpKind::kLeaf:
        break;
    }
  }

  GradMap out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op != OpKind::kLeaf || !n.trainable) continue;
    if (grads[id]) {
      out.emplace(id, std::move(*grads[id]));
    } else {
      out.emplace(id, Tensor(n.value.shape()));
    }
  }
  return out;
}

}  // namespace renofeat
