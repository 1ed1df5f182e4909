// SPDX-License-Identifier: Apache-2.0
#include "renofeat/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "renofeat/eval.hpp"
#include "renofeat/optim.hpp"
#include "renofeat/rng.hpp"
#include "renofeat/text.hpp"

namespace renofeat {

const char* to_string(Method method) {
  switch (method) {
    case Method::kLinear: return "linear";
    case Method::kFinetune: return "finetune";
    case Method::kL2sp: return "l2sp";
    case Method::kDelta: return "delta";
    case Method::kRetrain: return "retrain";
    case Method::kDeltaR: return "delta_r";
    case Method::kRenofeation: return "renofeation";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return c == '-' ? '_' : static_cast<char>(std::tolower(c)); });
  for (Method m : kAllMethods) {
    if (lower == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown transfer method '" + std::string(name) + "'");
}

bool starts_from_pretrained(Method method) {
  return method == Method::kLinear || method == Method::kFinetune || method == Method::kL2sp ||
         method == Method::kDelta;
}

bool needs_pretrained(Method method) { return method != Method::kRetrain; }

TransferConfig TransferConfig::defaults(Method method, std::uint64_t seed) {
  TransferConfig c;
  c.method = method;
  c.seed = seed;
  if (starts_from_pretrained(method)) {
    c.iterations = 3000;
    c.weight_decay = 0.0f;
  } else {
    c.iterations = 9000;
    c.weight_decay = 0.005f;
  }
  switch (method) {
    case Method::kL2sp: c.lambda_weight = 0.01f; break;
    case Method::kDelta:
    case Method::kDeltaR: c.lambda_feat = 1.0f; break;
    case Method::kRenofeation:
      c.lambda_feat = 1.0f;
      c.dropout_rate = 0.1f;
      c.swa = SwaConfig{c.lr / 2.0f, c.iterations / 3, 50};
      break;
    default: break;
  }
  return c;
}

void TransferConfig::validate() const {
  SgdOptions{lr, momentum, weight_decay}.validate();
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument(std::string(to_string(method)) + ": " + what);
  };
  if (batch_size == 0) fail("batch_size must be positive");
  if (log_every == 0) fail("log_every must be positive");
  if (!(beta >= 0.0f)) fail("beta must be >= 0");
  if (!(lambda_weight >= 0.0f) || !(lambda_feat >= 0.0f)) fail("regularizer weights must be >= 0");
  if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) fail("dropout_rate must lie in [0, 1)");
  switch (method) {
    case Method::kLinear:
    case Method::kFinetune:
    case Method::kRetrain:
      if (lambda_weight != 0.0f || lambda_feat != 0.0f) fail("takes no regularizer weight");
      break;
    case Method::kL2sp:
      if (lambda_feat != 0.0f) fail("lambda_feat must be 0");
      break;
    case Method::kDelta:
    case Method::kDeltaR:
    case Method::kRenofeation:
      if (lambda_weight != 0.0f) fail("lambda_weight must be 0");
      break;
  }
  if (method == Method::kRenofeation && (dropout_rate <= 0.0f || !swa)) {
    fail("needs a positive dropout rate and an averaging phase");
  }
  if (swa) {
    if (!(swa->lr > 0.0f)) fail("swa.lr must be positive");
    if (swa->average_every == 0) fail("swa.average_every must be positive");
  }
  if (adv_train) {
    if (!(adv_train->mix_prob >= 0.0 && adv_train->mix_prob <= 1.0)) fail("adv_train.mix_prob must lie in [0, 1]");
    if (!(adv_train->iteration_multiplier > 0.0)) fail("adv_train.iteration_multiplier must be positive");
    adv_train->attack.validate();
  }
}

NodeId l2sp_penalty(Graph& graph, std::span<const NodeId> theta, std::span<const NodeId> theta0,
                    double lambda_weight) {
  if (theta.size() != theta0.size() || theta.empty()) {
    throw ShapeError("l2sp penalty: tensor lists differ in length or are empty");
  }
  NodeId total = graph.sum_squares(theta[0], theta0[0]);
  for (std::size_t i = 1; i < theta.size(); ++i) {
    total = graph.add(total, graph.sum_squares(theta[i], theta0[i]));
  }
  return graph.scale(total, lambda_weight);
}

double l2sp_penalty(const std::vector<NamedTensor>& theta, const std::vector<NamedTensor>& theta0,
                    double lambda_weight) {
  if (theta.size() != theta0.size()) throw ShapeError("l2sp penalty: tensor lists differ in length");
  double sum = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    require_same_shape(theta[i].value, theta0[i].value, "l2sp penalty");
    sum += squared_distance(theta[i].value.values(), theta0[i].value.values());
  }
  return lambda_weight * sum;
}

namespace {

void check_hooks(std::span<const Tensor* const> student, std::span<const Tensor* const> teacher) {
  if (student.empty()) throw ShapeError("feature distillation needs at least one hook");
  if (student.size() != teacher.size()) {
    throw ShapeError("feature distillation: " + std::to_string(student.size()) +
                     " student hooks vs " + std::to_string(teacher.size()) + " teacher hooks");
  }
  for (std::size_t l = 0; l < student.size(); ++l) {
    require_same_shape(*student[l], *teacher[l], "feature distillation hook");
    if (student[l]->rank() < 2) throw ShapeError("feature distillation hooks must be batched");
  }
}

// 1 / (n_l * N) for a batched hook tensor.
double hook_weight(const Tensor& t) {
  return 1.0 / static_cast<double>(t.size());
}

}  // namespace

NodeId feature_distill_penalty(Graph& graph, std::span<const NodeId> student,
                               std::span<const NodeId> teacher, double lambda_feat) {
  std::vector<const Tensor*> s, t;
  for (NodeId id : student) s.push_back(&graph.value(id));
  for (NodeId id : teacher) t.push_back(&graph.value(id));
  check_hooks(s, t);
  NodeId total = 0;
  for (std::size_t l = 0; l < student.size(); ++l) {
    const NodeId term = graph.scale(graph.sum_squares(student[l], teacher[l]), hook_weight(*s[l]));
    total = l == 0 ? term : graph.add(total, term);
  }
  return graph.scale(total, lambda_feat);
}

double feature_distill_penalty(const std::vector<Tensor>& student,
                               const std::vector<Tensor>& teacher, double lambda_feat) {
  std::vector<const Tensor*> s, t;
  for (const auto& x : student) s.push_back(&x);
  for (const auto& x : teacher) t.push_back(&x);
  check_hooks(s, t);
  double total = 0.0;
  for (std::size_t l = 0; l < student.size(); ++l) {
    total += squared_distance(student[l].values(), teacher[l].values()) * hook_weight(student[l]);
  }
  return lambda_feat * total;
}

void swa_update(SwaState& state, const ParamSet& snapshot) {
  if (state.count == 0) {
    state.average = snapshot;
    state.count = 1;
    return;
  }
  auto absorb = [&](std::vector<NamedTensor>& avg, const std::vector<NamedTensor>& snap) {
    if (avg.size() != snap.size()) throw ShapeError("swa: snapshot has a different tensor count");
    const double c = static_cast<double>(state.count);
    for (std::size_t i = 0; i < avg.size(); ++i) {
      if (avg[i].name != snap[i].name) {
        throw ShapeError("swa: snapshot tensor '" + snap[i].name + "' where '" + avg[i].name +
                         "' was expected");
      }
      require_same_shape(avg[i].value, snap[i].value, "swa snapshot");
      Tensor& a = avg[i].value;
      for (std::size_t k = 0; k < a.size(); ++k) {
        a[k] = static_cast<float>((static_cast<double>(a[k]) * c + snap[i].value[k]) / (c + 1.0));
      }
    }
  };
  absorb(state.average.backbone, snapshot.backbone);
  absorb(state.average.head, snapshot.head);
  ++state.count;
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "iteration,task_loss,reg_loss,linear_reg,probe_feature_loss\n";
  for (const auto& r : records) {
    os << r.iteration << ',' << text::number(r.task_loss) << ',' << text::number(r.reg_loss) << ','
       << text::number(r.linear_reg) << ',' << text::number(r.probe_feature_loss) << '\n';
  }
  return os.str();
}

std::vector<std::size_t> probe_indices(const Corpus& corpus, std::size_t probe_size) {
  // Evenly spaced so every class is represented in a class-sorted corpus.
  const std::size_t m = corpus.size();
  const std::size_t k = std::min(probe_size, m);
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = i * m / k;
  return out;
}

double probe_feature_loss(const ModelSpec& spec, const ParamSet& params, const ParamSet& teacher,
                          const Tensor& images, float dropout_rate, std::uint64_t seed) {
  const auto target = forward(spec, teacher, images).stage_features;
  if (dropout_rate <= 0.0f) {
    return feature_distill_penalty(forward(spec, params, images).stage_features, target, 1.0);
  }
  const DropoutPlan plan{dropout_rate, DropoutMode::kTrain};
  double total = 0.0;
  for (std::size_t d = 0; d < kProbeDraws; ++d) {
    Rng rng = make_rng(seed, {tag(Stream::kProbe), d});
    total += feature_distill_penalty(forward(spec, params, images, &plan, &rng).stage_features, target, 1.0);
  }
  return total / static_cast<double>(kProbeDraws);
}

namespace {

// Rows [first, first+count) of each hook tensor, stacked in `indices` order.
std::vector<Tensor> gather_rows(const std::vector<Tensor>& hooks, const std::vector<std::size_t>& indices) {
  std::vector<Tensor> out;
  for (const auto& h : hooks) {
    Shape shape = h.shape();
    const std::size_t stride = h.size() / shape[0];
    shape[0] = indices.size();
    Tensor t(shape);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      std::copy(h.data() + indices[k] * stride, h.data() + (indices[k] + 1) * stride,
                t.data() + k * stride);
    }
    out.push_back(std::move(t));
  }
  return out;
}

// Eval-mode forward over a whole corpus in chunks, concatenated.
ForwardOutput forward_corpus(const ModelSpec& spec, const ParamSet& params, const Tensor& images) {
  constexpr std::size_t kChunk = 128;
  const std::size_t m = images.dim(0);
  std::vector<std::vector<float>> hooks;
  std::vector<Shape> hook_shapes;
  std::vector<float> pen;
  std::size_t pen_dim = 0;
  for (std::size_t first = 0; first < m; first += kChunk) {
    const std::size_t count = std::min(kChunk, m - first);
    ForwardOutput o = forward(spec, params, images.slice_rows(first, count));
    if (hooks.empty()) {
      hooks.resize(o.stage_features.size());
      for (const auto& f : o.stage_features) hook_shapes.push_back(f.shape());
      pen_dim = o.penultimate.dim(1);
    }
    for (std::size_t l = 0; l < hooks.size(); ++l) {
      auto v = o.stage_features[l].values();
      hooks[l].insert(hooks[l].end(), v.begin(), v.end());
    }
    auto p = o.penultimate.values();
    pen.insert(pen.end(), p.begin(), p.end());
  }
  ForwardOutput out;
  for (std::size_t l = 0; l < hooks.size(); ++l) {
    Shape s = hook_shapes[l];
    s[0] = m;
    out.stage_features.emplace_back(s, std::move(hooks[l]));
  }
  out.penultimate = Tensor({m, pen_dim}, std::move(pen));
  return out;
}

class Trainer {
 public:
  Trainer(const TransferConfig& config, const ModelSpec& spec, const Corpus& corpus,
          const ParamSet* teacher)
      : config_(config), spec_(spec), corpus_(corpus), teacher_(teacher),
        stream_(corpus, config.batch_size, derive_seed(config.seed, {tag(Stream::kShuffle)})) {
    frozen_backbone_ = config.method == Method::kLinear;
    use_feat_ = config.lambda_feat > 0.0f;
    use_l2sp_ = config.lambda_weight > 0.0f;
    dropout_ = DropoutPlan{config.dropout_rate, DropoutMode::kTrain};

    if (teacher_ != nullptr) {
      probe_images_ = corpus.gather(probe_indices(corpus, config.probe_size));
    }
    // Precomputed teacher hooks for clean batches; adversarial batches are
    // recomputed on the fly.
    if (use_feat_) teacher_hooks_ = forward_corpus(spec_, *teacher_, corpus.images).stage_features;
    // With a frozen backbone and no adversarial mixing the penultimate feature
    // of every sample is fixed, so the head can train on cached features.
    if (frozen_backbone_ && !config.adv_train) {
      ParamSet backbone_only{initial_backbone(), {}};
      backbone_only.head = init_head(spec_, 0);
      cached_penultimate_ = forward_corpus(spec_, backbone_only, corpus.images).penultimate;
      has_cached_penultimate_ = true;
    }
  }

  std::vector<NamedTensor> initial_backbone() const {
    if (starts_from_pretrained(config_.method)) return teacher_->backbone;
    ModelSpec init_spec = spec_;
    init_spec.seed = derive_seed(config_.seed, {tag(Stream::kInit)});
    return build_model(init_spec).backbone;
  }

  TrainResult run() {
    ParamSet params;
    params.backbone = initial_backbone();
    params.head = init_head(spec_, derive_seed(config_.seed, {tag(Stream::kHeadInit)}));
    velocity_ = zero_like(params);

    std::size_t main = config_.iterations;
    if (config_.adv_train) {
      main = static_cast<std::size_t>(std::llround(static_cast<double>(main) *
                                                   config_.adv_train->iteration_multiplier));
    }
    TrainResult result;
    const SgdOptions main_opts{config_.lr, config_.momentum, config_.weight_decay};
    for (std::size_t it = 0; it < main; ++it) {
      step(params, it, main_opts, (it % config_.log_every == 0 || it + 1 == main), result.log);
    }
    result.log.main_iterations = result.log.records.size();

    if (config_.swa && config_.swa->iterations > 0) {
      SwaState swa;
      const SgdOptions swa_opts{config_.swa->lr, config_.momentum, config_.weight_decay};
      const std::size_t n = config_.swa->iterations;
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t it = main + s;
        step(params, it, swa_opts, (it % config_.log_every == 0 || s + 1 == n), result.log);
        if ((s + 1) % config_.swa->average_every == 0) swa_update(swa, params);
      }
      result.log.swa_snapshots = swa.count;
      if (swa.count > 0) params = std::move(swa.average);
    }
    if (teacher_ != nullptr) {
      result.final_probe_feature_loss = probe_loss(params);
    }
    result.params = std::move(params);
    return result;
  }

 private:
  double probe_loss(const ParamSet& params) const {
    return probe_feature_loss(spec_, params, *teacher_, probe_images_, config_.dropout_rate, config_.seed);
  }

  static ParamSet zero_like(const ParamSet& p) {
    ParamSet z = p;
    for (auto& t : z.backbone) t.value.fill(0.0f);
    for (auto& t : z.head) t.value.fill(0.0f);
    return z;
  }

  void step(ParamSet& params, std::size_t it, const SgdOptions& opts, bool log, TrainLog& train_log) {
    Batch batch = stream_.at(it);
    bool adversarial = false;
    if (config_.adv_train) {
      Rng mix = make_rng(config_.seed, {tag(Stream::kAdversarialMix), it});
      adversarial = std::bernoulli_distribution(config_.adv_train->mix_prob)(mix);
      if (adversarial) batch.images = craft_batch(batch, it);
    }

    Graph graph;
    ParamNodes nodes;
    NodeId logits = 0;
    ForwardNodes fw;
    if (has_cached_penultimate_) {
      for (const auto& t : params.head) nodes.head.push_back(graph.leaf(t.value, true));
      const NodeId pen = graph.constant(gather_rows({cached_penultimate_}, batch.indices)[0]);
      logits = graph.dense(pen, nodes.head[0], nodes.head[1]);
    } else {
      nodes = add_params(graph, params, !frozen_backbone_, true);
      Rng drop_rng = make_rng(config_.seed, {tag(Stream::kDropout), it});
      const NodeId input = graph.constant(batch.images);
      fw = build_forward(graph, spec_, nodes, input, &dropout_, &drop_rng);
      logits = fw.logits;
    }

    const NodeId task = graph.softmax_cross_entropy(logits, batch.labels);
    NodeId loss = task;
    NodeId reg = 0;
    bool has_reg = false;
    if (use_l2sp_) {
      std::vector<NodeId> anchors;
      for (const auto& t : teacher_->backbone) anchors.push_back(graph.constant(t.value));
      reg = l2sp_penalty(graph, nodes.backbone, anchors, config_.lambda_weight);
      has_reg = true;
    } else if (use_feat_) {
      std::vector<Tensor> targets =
          adversarial ? forward(spec_, *teacher_, batch.images).stage_features
                      : gather_rows(teacher_hooks_, batch.indices);
      std::vector<NodeId> teacher_nodes;
      for (auto& t : targets) teacher_nodes.push_back(graph.constant(std::move(t)));
      reg = feature_distill_penalty(graph, fw.stage_features, teacher_nodes, config_.lambda_feat);
      has_reg = true;
    }
    if (has_reg) loss = graph.add(loss, reg);
    NodeId linear = 0;
    const bool has_linear = config_.beta > 0.0f;
    if (has_linear) {
      linear = graph.scale(graph.add(graph.sum_squares(nodes.head[0]), graph.sum_squares(nodes.head[1])),
                           config_.beta);
      loss = graph.add(loss, linear);
    }

    const double loss_value = graph.value(loss).item();
    if (!std::isfinite(loss_value)) {
      std::string last = last_finite_ ? std::to_string(*last_finite_) : std::string("none");
      throw TrainingError(std::string(to_string(config_.method)) + ": non-finite loss at iteration " +
                          std::to_string(it) + " (last finite iteration: " + last + ")");
    }
    last_finite_ = it;

    const GradMap grads = graph.backward(loss);
    auto apply = [&](std::vector<NamedTensor>& group, std::vector<NamedTensor>& vel,
                     const std::vector<NodeId>& ids) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        sgd_step(group[i].value, grads.at(ids[i]), vel[i].value, opts);
      }
    };
    if (!frozen_backbone_) apply(params.backbone, velocity_.backbone, nodes.backbone);
    apply(params.head, velocity_.head, nodes.head);

    if (log) {
      TrainRecord r;
      r.iteration = it;
      r.task_loss = graph.value(task).item();
      r.reg_loss = has_reg ? graph.value(reg).item() : 0.0;
      r.linear_reg = has_linear ? graph.value(linear).item() : 0.0;
      if (teacher_ != nullptr) {
        r.probe_feature_loss = probe_loss(params);
      }
      train_log.records.push_back(r);
    }
  }

  Tensor craft_batch(const Batch& batch, std::size_t it) const {
    AttackConfig attack = config_.adv_train->attack;
    attack.iterations = config_.adv_train->pgd_steps;
    attack.seed = derive_seed(config_.seed, {tag(Stream::kAttackTarget), it});
    std::vector<std::size_t> targets;
    for (std::size_t idx : batch.indices) targets.push_back(target_for(attack, idx, spec_.feature_dim()));
    return craft(spec_, *teacher_, batch.images, attack, targets).adversarial;
  }

  const TransferConfig& config_;
  const ModelSpec& spec_;
  const Corpus& corpus_;
  const ParamSet* teacher_;
  BatchStream stream_;
  bool frozen_backbone_ = false;
  bool use_feat_ = false;
  bool use_l2sp_ = false;
  DropoutPlan dropout_;
  Tensor probe_images_;
  std::vector<Tensor> teacher_hooks_;
  Tensor cached_penultimate_;
  bool has_cached_penultimate_ = false;
  ParamSet velocity_;
  std::optional<std::size_t> last_finite_;
};

}  // namespace

TrainResult train(const TransferConfig& config, const ModelSpec& architecture, const Corpus& corpus,
                  const ParamSet* pretrained) {
  config.validate();
  corpus.validate();
  if (corpus.size() == 0) throw DataError(DataErrorCode::kEmptyCorpus, "training corpus is empty");
  ModelSpec spec = architecture;
  spec.num_classes = corpus.class_count;
  spec.validate();
  const ParamSet* teacher = needs_pretrained(config.method) ? pretrained : nullptr;
  if (needs_pretrained(config.method)) {
    if (pretrained == nullptr) {
      throw std::invalid_argument(std::string(to_string(config.method)) +
                                  " needs a pre-trained model");
    }
    ModelSpec source = spec;
    source.num_classes = pretrained->head.size() == 2 ? pretrained->head[1].value.size() : 0;
    check_layout(source, *pretrained);
  }
  Trainer trainer(config, spec, corpus, teacher);
  return trainer.run();
}

std::vector<TransferConfig> Grid::cells(const TransferConfig& base) const {
  if (lr.empty() && momentum.empty() && weight_decay.empty() && lambda_feat.empty()) {
    throw std::invalid_argument("grid search needs at least one axis value");
  }
  auto axis = [](const std::vector<float>& v, float fallback) {
    return v.empty() ? std::vector<float>{fallback} : v;
  };
  std::vector<TransferConfig> out;
  for (float a : axis(lr, base.lr)) {
    for (float m : axis(momentum, base.momentum)) {
      for (float w : axis(weight_decay, base.weight_decay)) {
        for (float f : axis(lambda_feat, base.lambda_feat)) {
          TransferConfig c = base;
          c.lr = a;
          c.momentum = m;
          c.weight_decay = w;
          c.lambda_feat = f;
          if (c.swa && !lr.empty()) c.swa->lr = a / 2.0f;
          out.push_back(c);
        }
      }
    }
  }
  return out;
}

GridResult grid_search(const TransferConfig& base, const Grid& grid, const ModelSpec& architecture,
                       const Corpus& train_corpus, const Corpus& val, const ParamSet* pretrained) {
  const auto cells = grid.cells(base);
  ModelSpec spec = architecture;
  spec.num_classes = train_corpus.class_count;
  GridResult result;
  double best = -1.0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    TransferConfig cell = cells[i];
    cell.seed = derive_seed(base.seed, {tag(Stream::kGridCell), i});
    TrainResult trained = train(cell, architecture, train_corpus, pretrained);
    const double acc = clean_accuracy(spec, trained.params, val).percent;
    result.table.push_back({cell, acc});
    if (acc > best) {
      best = acc;
      result.best_config = cell;
      result.best_params = std::move(trained.params);
    }
  }
  return result;
}

}  // namespace renofeat
