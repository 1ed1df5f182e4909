// SPDX-License-Identifier: Apache-2.0
#include "experiment.hpp"

#include <cmath>
#include <functional>

#include "renofeat/text.hpp"

namespace renofeat::cli {

namespace {

// One entry per config key: how to read it into an Experiment and how to
// write it back out.
struct Binding {
  std::string key;
  std::function<void(Experiment&, const Config&)> read;
  std::function<std::string(const Experiment&)> write;
};

std::string join(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + text::number(values[i]);
  return out;
}

std::string join(const std::vector<std::string>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + values[i];
  return out;
}

template <typename T>
Binding count(std::string key, T Experiment::*field) {
  return {key, [key, field](Experiment& e, const Config& c) { e.*field = static_cast<T>(c.get_u64(key)); },
          [field](const Experiment& e) { return std::to_string(e.*field); }};
}

Binding real(std::string key, float Experiment::*field) {
  return {key, [key, field](Experiment& e, const Config& c) { e.*field = static_cast<float>(c.get_double(key)); },
          [field](const Experiment& e) { return text::number(e.*field); }};
}

Binding list(std::string key, std::vector<double> Experiment::*field) {
  return {key, [key, field](Experiment& e, const Config& c) { e.*field = c.get_list(key); },
          [field](const Experiment& e) { return join(e.*field); }};
}

Binding word(std::string key, std::string Experiment::*field) {
  return {key, [key, field](Experiment& e, const Config& c) { e.*field = c.get_string(key); },
          [field](const Experiment& e) { return e.*field; }};
}

void task_bindings(std::vector<Binding>& out, const std::string& section, TaskSettings Experiment::*task) {
  auto u64 = [&](const std::string& name, auto TaskSettings::*field) {
    const std::string key = section + "." + name;
    out.push_back({key,
                   [key, task, field](Experiment& e, const Config& c) {
                     (e.*task).*field = static_cast<std::decay_t<decltype((e.*task).*field)>>(c.get_u64(key));
                   },
                   [task, field](const Experiment& e) { return std::to_string((e.*task).*field); }});
  };
  u64("classes", &TaskSettings::classes);
  u64("train_per_class", &TaskSettings::train_per_class);
  u64("test_per_class", &TaskSettings::test_per_class);
  u64("class_offset", &TaskSettings::class_offset);
  u64("seed", &TaskSettings::seed);
  const std::string shift = section + ".domain_shift";
  out.push_back({shift, [shift, task](Experiment& e, const Config& c) { (e.*task).domain_shift = c.get_double(shift); },
                 [task](const Experiment& e) { return text::number((e.*task).domain_shift); }});
}

std::size_t whole(double v, const std::string& key) {
  if (!(v >= 1.0) || v != std::floor(v)) {
    throw ConfigError("key '" + key + "': expected positive integers, got " + text::number(v));
  }
  return static_cast<std::size_t>(v);
}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> all = [] {
    std::vector<Binding> b;
    b.push_back(count("run.seed", &Experiment::seed));

    b.push_back(count("model.image_size", &Experiment::image_size));
    b.push_back({"model.widths",
                 [](Experiment& e, const Config& c) {
                   e.widths.clear();
                   for (double v : c.get_list("model.widths")) e.widths.push_back(whole(v, "model.widths"));
                 },
                 [](const Experiment& e) {
                   std::vector<double> v(e.widths.begin(), e.widths.end());
                   return join(v);
                 }});
    b.push_back(count("model.convs", &Experiment::convs));

    b.push_back(count("catalog.seed", &Experiment::catalog_seed));
    task_bindings(b, "source", &Experiment::source);
    task_bindings(b, "target", &Experiment::target);

    b.push_back(count("pretrain.seed", &Experiment::pretrain_seed));
    b.push_back(count("pretrain.iterations", &Experiment::pretrain_iterations));
    b.push_back(count("pretrain.batch_size", &Experiment::pretrain_batch_size));
    b.push_back(real("pretrain.lr", &Experiment::pretrain_lr));
    b.push_back(real("pretrain.momentum", &Experiment::pretrain_momentum));
    b.push_back(real("pretrain.weight_decay", &Experiment::pretrain_weight_decay));

    b.push_back(count("transfer.finetune_iterations", &Experiment::finetune_iterations));
    b.push_back(count("transfer.retrain_iterations", &Experiment::retrain_iterations));
    b.push_back(count("transfer.batch_size", &Experiment::batch_size));
    b.push_back(real("transfer.lr", &Experiment::lr));
    b.push_back(real("transfer.momentum", &Experiment::momentum));
    b.push_back(real("transfer.finetune_weight_decay", &Experiment::finetune_weight_decay));
    b.push_back(real("transfer.retrain_weight_decay", &Experiment::retrain_weight_decay));
    b.push_back(real("transfer.beta", &Experiment::beta));
    b.push_back(real("transfer.lambda_weight", &Experiment::lambda_weight));
    b.push_back(real("transfer.lambda_feat", &Experiment::lambda_feat));
    b.push_back(real("transfer.lambda_feat_reinit", &Experiment::lambda_feat_reinit));
    b.push_back(real("transfer.dropout_rate", &Experiment::dropout_rate));
    b.push_back(count("transfer.swa_average_every", &Experiment::swa_average_every));
    b.push_back(count("transfer.log_every", &Experiment::log_every));
    b.push_back(count("transfer.probe_size", &Experiment::probe_size));

    b.push_back({"attack.budget",
                 [](Experiment& e, const Config& c) { e.attack.budget = static_cast<float>(c.get_double("attack.budget")); },
                 [](const Experiment& e) { return text::number(e.attack.budget); }});
    b.push_back({"attack.iterations",
                 [](Experiment& e, const Config& c) { e.attack.iterations = c.get_u64("attack.iterations"); },
                 [](const Experiment& e) { return std::to_string(e.attack.iterations); }});
    b.push_back({"attack.step_size",
                 [](Experiment& e, const Config& c) {
                   e.attack.step_size = static_cast<float>(c.get_double("attack.step_size"));
                 },
                 [](const Experiment& e) { return text::number(e.attack.step_size); }});
    b.push_back({"attack.magnitude",
                 [](Experiment& e, const Config& c) {
                   e.attack.magnitude = static_cast<float>(c.get_double("attack.magnitude"));
                 },
                 [](const Experiment& e) { return text::number(e.attack.magnitude); }});
    b.push_back({"attack.target_policy",
                 [](Experiment& e, const Config& c) {
                   const std::string v = c.get_string("attack.target_policy");
                   if (v == "random_per_image") e.attack.target_policy = TargetPolicy::kRandomPerImage;
                   else if (v == "fixed") e.attack.target_policy = TargetPolicy::kFixed;
                   else throw ConfigError("attack.target_policy: expected random_per_image or fixed, got '" + v + "'");
                 },
                 [](const Experiment& e) { return std::string(to_string(e.attack.target_policy)); }});
    b.push_back({"attack.fixed_target",
                 [](Experiment& e, const Config& c) { e.attack.fixed_target = c.get_u64("attack.fixed_target"); },
                 [](const Experiment& e) { return std::to_string(e.attack.fixed_target); }});
    b.push_back({"attack.step_rule",
                 [](Experiment& e, const Config& c) {
                   const std::string v = c.get_string("attack.step_rule");
                   if (v == "signed_gradient") e.attack.step_rule = StepRule::kSignedGradient;
                   else if (v == "raw_gradient") e.attack.step_rule = StepRule::kRawGradient;
                   else throw ConfigError("attack.step_rule: expected signed_gradient or raw_gradient, got '" + v + "'");
                 },
                 [](const Experiment& e) { return std::string(to_string(e.attack.step_rule)); }});

    b.push_back(word("sweep.axis", &Experiment::sweep_axis));
    b.push_back(word("sweep.method", &Experiment::sweep_method));
    b.push_back(list("sweep.lr", &Experiment::sweep_lr));
    b.push_back(list("sweep.momentum", &Experiment::sweep_momentum));
    b.push_back(list("sweep.weight_decay", &Experiment::sweep_weight_decay));
    b.push_back(list("sweep.lambda_feat", &Experiment::sweep_lambda_feat));
    b.push_back(list("sweep.fractions", &Experiment::sweep_fractions));
    b.push_back({"sweep.fraction_methods",
                 [](Experiment& e, const Config& c) {
                   e.sweep_fraction_methods = text::split(c.get_string("sweep.fraction_methods"), ',');
                 },
                 [](const Experiment& e) { return join(e.sweep_fraction_methods); }});
    return b;
  }();
  return all;
}

}  // namespace

const std::set<std::string>& Experiment::known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const auto& b : bindings()) k.insert(b.key);
    return k;
  }();
  return keys;
}

Experiment Experiment::from_config(const Config& config) {
  config.reject_unknown(known_keys());
  Experiment e;
  for (const auto& b : bindings()) {
    if (config.has(b.key)) b.read(e, config);
  }
  if (e.widths.size() < 2) throw ConfigError("model.widths: need at least two stages");
  if (e.sweep_axis != "grid" && e.sweep_axis != "lambda_feat" && e.sweep_axis != "fraction") {
    throw ConfigError("sweep.axis: unknown axis '" + e.sweep_axis + "' (expected grid, lambda_feat or fraction)");
  }
  try {
    parse_method(e.sweep_method);
    for (const auto& m : e.sweep_fraction_methods) parse_method(m);
    e.attack.validate();
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  }
  for (double f : e.sweep_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("sweep.fractions: values must lie in (0, 1]");
  }
  return e;
}

Config Experiment::to_config() const {
  Config c;
  for (const auto& b : bindings()) c.set(b.key, b.write(*this));
  return c;
}

TaskSpec Experiment::source_task() const {
  TaskSpec t;
  t.class_count = source.classes;
  t.train_per_class = source.train_per_class;
  t.test_per_class = source.test_per_class;
  t.image_size = image_size;
  t.class_offset = source.class_offset;
  t.seed = source.seed;
  t.catalog_seed = catalog_seed;
  t.domain_shift = source.domain_shift;
  return t;
}

TaskSpec Experiment::target_task() const {
  TaskSpec t;
  t.class_count = target.classes;
  t.train_per_class = target.train_per_class;
  t.test_per_class = target.test_per_class;
  t.image_size = image_size;
  t.class_offset = target.class_offset;
  t.seed = target.seed + seed;
  t.catalog_seed = catalog_seed;
  t.domain_shift = target.domain_shift;
  return t;
}

ModelSpec Experiment::architecture(std::size_t num_classes) const {
  ModelSpec spec;
  for (std::size_t w : widths) spec.stages.push_back({convs, w});
  spec.channels = 3;
  spec.height = spec.width = image_size;
  spec.num_classes = num_classes;
  return spec;
}

TransferConfig Experiment::pretrain_config() const {
  TransferConfig c = TransferConfig::defaults(Method::kRetrain, pretrain_seed);
  c.iterations = pretrain_iterations;
  c.batch_size = pretrain_batch_size;
  c.lr = pretrain_lr;
  c.momentum = pretrain_momentum;
  c.weight_decay = pretrain_weight_decay;
  c.beta = beta;
  c.log_every = log_every;
  return c;
}

TransferConfig Experiment::transfer_config(Method method) const {
  TransferConfig c = TransferConfig::defaults(method, seed);
  const bool from_pretrained = starts_from_pretrained(method);
  c.iterations = from_pretrained ? finetune_iterations : retrain_iterations;
  c.weight_decay = from_pretrained ? finetune_weight_decay : retrain_weight_decay;
  c.batch_size = batch_size;
  c.lr = lr;
  c.momentum = momentum;
  c.beta = beta;
  c.log_every = log_every;
  c.probe_size = probe_size;
  switch (method) {
    case Method::kL2sp: c.lambda_weight = lambda_weight; break;
    case Method::kDelta: c.lambda_feat = lambda_feat; break;
    case Method::kDeltaR: c.lambda_feat = lambda_feat_reinit; break;
    case Method::kRenofeation:
      c.lambda_feat = lambda_feat_reinit;
      c.dropout_rate = dropout_rate;
      c.swa = SwaConfig{lr / 2.0f, c.iterations / 3, swa_average_every};
      break;
    default: break;
  }
  c.validate();
  return c;
}

AttackConfig Experiment::attack_config() const {
  AttackConfig a = attack;
  a.seed = seed;
  return a;
}

PretrainOutcome pretrain(const Experiment& exp) {
  const auto [train_set, test_set] = generate_synthetic(exp.source_task());
  const ModelSpec spec = exp.architecture(train_set.class_count);
  TrainResult r = train(exp.pretrain_config(), spec, train_set, nullptr);
  PretrainOutcome out;
  out.source_test_top1 = clean_accuracy(spec, r.params, test_set).percent;
  out.params = std::move(r.params);
  out.log = std::move(r.log);
  return out;
}

TargetData target_data(const Experiment& exp, double fraction) {
  auto [train_set, test_set] = generate_synthetic(exp.target_task());
  if (fraction < 1.0) train_set = subsample_per_class(train_set, fraction, exp.seed);
  return {std::move(train_set), std::move(test_set)};
}

AdversarialBatch attack_target(const Experiment& exp, const ParamSet& pretrained, const Corpus& test) {
  const ModelSpec spec = exp.architecture(exp.source.classes);
  check_layout(spec, pretrained);
  return batch_attack(spec, pretrained, test, exp.attack_config());
}

EvalReport evaluate_model(const Experiment& exp, const std::string& method, const std::string& cell,
                          const ParamSet& model, const ParamSet& pretrained, const TargetData& data,
                          const AdversarialBatch& adv) {
  const ModelSpec spec = exp.architecture(data.test.class_count);
  const Accuracy clean = clean_accuracy(spec, model, data.test);
  EvalReport row;
  row.method = method;
  row.dataset = "synthetic";
  row.cell = cell;
  row.clean_top1 = clean.percent;
  row.asr = attack_success_rate(spec, model, data.test, adv);
  row.weight_distance = weight_distance(model.backbone, pretrained.backbone);
  row.feature_distance = feature_distance(spec, model, pretrained, data.train);
  row.n_samples = data.test.size();
  row.n_clean_correct = clean.correct_count();
  return row;
}

}  // namespace renofeat::cli
