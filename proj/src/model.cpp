// SPDX-License-Identifier: Apache-2.0
#include "renofeat/model.hpp"

#include <cmath>
#include <stdexcept>

namespace renofeat {

ModelSpec ModelSpec::desk_default(std::size_t num_classes, std::uint64_t seed) {
  ModelSpec spec;
  spec.stages = {{2, 16}, {2, 32}, {2, 64}};
  spec.channels = 3;
  spec.height = 32;
  spec.width = 32;
  spec.num_classes = num_classes;
  spec.seed = seed;
  return spec;
}

void ModelSpec::validate() const {
  if (stages.size() < 2) {
    throw std::invalid_argument("model spec needs at least 2 stages, got " +
                                std::to_string(stages.size()));
  }
  if (channels == 0 || height == 0 || width == 0) {
    throw std::invalid_argument("model spec input dimensions must be positive");
  }
  if (num_classes < 2) throw std::invalid_argument("model spec needs at least 2 classes");
  std::size_t h = height, w = width;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (stages[s].convs == 0 || stages[s].width == 0) {
      throw std::invalid_argument("stage " + std::to_string(s) + " must have convs and width > 0");
    }
    if (h % 2 != 0 || w % 2 != 0) {
      throw std::invalid_argument("stage " + std::to_string(s) + " input " + std::to_string(h) +
                                  "x" + std::to_string(w) + " is not divisible by the 2x2 pool");
    }
    h /= 2;
    w /= 2;
  }
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : backbone) n += t.value.size();
  for (const auto& t : head) n += t.value.size();
  return n;
}

const Tensor* ParamSet::find(const std::string& name) const {
  for (const auto* group : {&backbone, &head}) {
    for (const auto& t : *group) {
      if (t.name == name) return &t.value;
    }
  }
  return nullptr;
}

std::vector<TensorLayout> param_layout(const ModelSpec& spec) {
  std::vector<TensorLayout> layout;
  std::size_t in_ch = spec.channels;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    for (std::size_t k = 0; k < spec.stages[s].convs; ++k) {
      const std::string prefix = "stage" + std::to_string(s) + ".conv" + std::to_string(k);
      const std::size_t out_ch = spec.stages[s].width;
      layout.push_back({prefix + ".weight", {out_ch, in_ch, 3, 3}, false, in_ch * 9, false});
      layout.push_back({prefix + ".bias", {out_ch}, false, in_ch * 9, true});
      in_ch = out_ch;
    }
  }
  layout.push_back({"head.weight", {in_ch, spec.num_classes}, true, in_ch, false});
  layout.push_back({"head.bias", {spec.num_classes}, true, in_ch, true});
  return layout;
}

namespace {

Tensor init_tensor(const TensorLayout& entry, Rng& rng) {
  Tensor t(entry.shape);
  if (entry.is_bias) return t;
  std::normal_distribution<float> normal(
      0.0f, static_cast<float>(std::sqrt(2.0 / static_cast<double>(entry.fan_in))));
  for (float& v : t.values()) v = normal(rng);
  return t;
}

}  // namespace

ParamSet build_model(const ModelSpec& spec) {
  spec.validate();
  ParamSet params;
  const auto layout = param_layout(spec);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].head) continue;
    Rng rng = make_rng(spec.seed, {tag(Stream::kInit), i});
    params.backbone.push_back({layout[i].name, init_tensor(layout[i], rng)});
  }
  params.head = init_head(spec, spec.seed);
  return params;
}

std::vector<NamedTensor> init_head(const ModelSpec& spec, std::uint64_t seed) {
  std::vector<NamedTensor> head;
  std::uint64_t j = 0;
  for (const auto& entry : param_layout(spec)) {
    if (!entry.head) continue;
    Rng rng = make_rng(seed, {tag(Stream::kHeadInit), j++});
    head.push_back({entry.name, init_tensor(entry, rng)});
  }
  return head;
}

void check_layout(const ModelSpec& spec, const ParamSet& params) {
  const auto layout = param_layout(spec);
  std::size_t bi = 0, hi = 0;
  for (const auto& entry : layout) {
    const auto& group = entry.head ? params.head : params.backbone;
    std::size_t& cursor = entry.head ? hi : bi;
    if (cursor >= group.size() || group[cursor].name != entry.name) {
      throw ShapeError("parameter tensor '" + entry.name + "' is missing or out of order");
    }
    if (group[cursor].value.shape() != entry.shape) {
      throw ShapeError("parameter tensor '" + entry.name + "' has shape " +
                       to_string(group[cursor].value.shape()) + ", expected " +
                       to_string(entry.shape));
    }
    ++cursor;
  }
  if (bi != params.backbone.size()) {
    throw ShapeError("unexpected parameter tensor '" + params.backbone[bi].name + "'");
  }
  if (hi != params.head.size()) {
    throw ShapeError("unexpected parameter tensor '" + params.head[hi].name + "'");
  }
}

Tensor spatial_dropout_mask(std::size_t batch, std::size_t channels, float rate, Rng& rng) {
  if (!(rate >= 0.0f && rate < 1.0f)) {
    throw std::invalid_argument("spatial dropout rate must lie in [0, 1)");
  }
  Tensor mask({batch, channels}, 1.0f);
  if (rate == 0.0f) return mask;
  const float keep_scale = 1.0f / (1.0f - rate);
  std::bernoulli_distribution drop(rate);
  for (float& m : mask.values()) m = drop(rng) ? 0.0f : keep_scale;
  return mask;
}

Tensor spatial_dropout(const Tensor& features, float rate, DropoutMode mode, Rng& rng) {
  if (!(rate >= 0.0f && rate < 1.0f)) {
    throw std::invalid_argument("spatial dropout rate must lie in [0, 1)");
  }
  if (features.rank() != 4) throw ShapeError("spatial_dropout expects [N,C,H,W]");
  if (mode == DropoutMode::kEval || rate == 0.0f) return features;
  const Tensor mask = spatial_dropout_mask(features.dim(0), features.dim(1), rate, rng);
  Tensor out = features;
  const std::size_t area = features.dim(2) * features.dim(3);
  for (std::size_t p = 0; p < mask.size(); ++p) {
    for (std::size_t i = 0; i < area; ++i) out[p * area + i] *= mask[p];
  }
  return out;
}

ParamNodes add_params(Graph& graph, const ParamSet& params, bool train_backbone, bool train_head) {
  ParamNodes nodes;
  for (const auto& t : params.backbone) nodes.backbone.push_back(graph.leaf(t.value, train_backbone));
  for (const auto& t : params.head) nodes.head.push_back(graph.leaf(t.value, train_head));
  return nodes;
}

ForwardNodes build_forward(Graph& graph, const ModelSpec& spec, const ParamNodes& params,
                           NodeId input, const DropoutPlan* dropout, Rng* rng) {
  const bool noisy = dropout != nullptr && dropout->active();
  if (noisy && rng == nullptr) throw std::invalid_argument("train-mode dropout needs an rng");
  ForwardNodes out;
  NodeId x = input;
  std::size_t p = 0;
  for (const auto& stage : spec.stages) {
    for (std::size_t k = 0; k < stage.convs; ++k) {
      x = graph.conv2d(x, params.backbone.at(p), params.backbone.at(p + 1), 1, 1);
      x = graph.relu(x);
      p += 2;
    }
    if (noisy) {
      const Tensor& v = graph.value(x);
      x = graph.channel_mask(x, spatial_dropout_mask(v.dim(0), v.dim(1), dropout->rate, *rng));
    }
    out.stage_features.push_back(x);
    x = graph.max_pool2x2(x);
  }
  out.penultimate = graph.global_avg_pool(x);
  out.logits = graph.dense(out.penultimate, params.head.at(0), params.head.at(1));
  return out;
}

ForwardOutput forward(const ModelSpec& spec, const ParamSet& params, const Tensor& batch,
                      const DropoutPlan* dropout, Rng* rng) {
  if (batch.rank() != 4 || batch.dim(1) != spec.channels || batch.dim(2) != spec.height ||
      batch.dim(3) != spec.width) {
    throw ShapeError("forward: batch shape " + to_string(batch.shape()) +
                     " does not match model input [N," + std::to_string(spec.channels) + "," +
                     std::to_string(spec.height) + "," + std::to_string(spec.width) + "]");
  }
  for (float v : batch.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::domain_error("forward: pixel outside [0,1]");
  }
  Graph graph;
  const ParamNodes nodes = add_params(graph, params, false, false);
  const NodeId input = graph.constant(batch);
  const ForwardNodes fw = build_forward(graph, spec, nodes, input, dropout, rng);
  ForwardOutput out;
  for (NodeId id : fw.stage_features) out.stage_features.push_back(graph.value(id));
  out.penultimate = graph.value(fw.penultimate);
  out.logits = graph.value(fw.logits);
  return out;
}

}  // namespace renofeat
