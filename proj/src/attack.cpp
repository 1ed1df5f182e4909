// SPDX-License-Identifier: Apache-2.0
#include "renofeat/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "renofeat/graph.hpp"
#include "renofeat/io.hpp"
#include "renofeat/rng.hpp"
#include "renofeat/text.hpp"

namespace renofeat {

const char* to_string(TargetPolicy policy) {
  return policy == TargetPolicy::kFixed ? "fixed" : "random_per_image";
}

const char* to_string(StepRule rule) {
  return rule == StepRule::kRawGradient ? "raw_gradient" : "signed_gradient";
}

void AttackConfig::validate() const {
  if (!(budget >= 0.0f)) throw std::invalid_argument("attack budget must be >= 0");
  if (!(step_size > 0.0f)) throw std::invalid_argument("attack step size must be > 0");
  if (!(magnitude > 0.0f)) throw std::invalid_argument("attack target magnitude must be > 0");
}

Tensor one_hot_targets(const std::vector<std::size_t>& indices, std::size_t dim, float magnitude) {
  Tensor t({indices.size(), dim});
  for (std::size_t n = 0; n < indices.size(); ++n) {
    if (indices[n] >= dim) {
      throw ShapeError("attack target index " + std::to_string(indices[n]) +
                       " outside feature dimension " + std::to_string(dim));
    }
    t[n * dim + indices[n]] = magnitude;
  }
  return t;
}

ObjectiveEval attack_objective(const ModelSpec& spec, const ParamSet& pretrained,
                               const Tensor& images, const Tensor& targets) {
  Graph graph;
  const ParamNodes params = add_params(graph, pretrained, false, false);
  const NodeId x = graph.leaf(images, true);
  const ForwardNodes fw = build_forward(graph, spec, params, x);
  const Tensor& features = graph.value(fw.penultimate);
  if (targets.shape() != features.shape()) {
    throw ShapeError("attack objective: target " + to_string(targets.shape()) +
                     " does not match penultimate features " + to_string(features.shape()));
  }
  const NodeId loss = graph.sum_squares(fw.penultimate, graph.constant(targets));
  ObjectiveEval eval;
  const std::size_t rows = features.dim(0), dim = features.dim(1);
  eval.values.resize(rows);
  for (std::size_t n = 0; n < rows; ++n) {
    eval.values[n] = squared_distance(features.values().subspan(n * dim, dim),
                                      targets.values().subspan(n * dim, dim));
  }
  eval.grad = graph.backward(loss).at(x);
  return eval;
}

namespace {

// Per-pixel feasible interval [lo, hi] such that |v - x| <= budget holds for
// every v inside it under float subtraction, and [lo, hi] is inside [0, 1].
void feasible_bounds(const Tensor& x, float budget, Tensor& lo, Tensor& hi) {
  lo = Tensor(x.shape());
  hi = Tensor(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float xi = x[i];
    float l = std::max(0.0f, xi - budget);
    float h = std::min(1.0f, xi + budget);
    while (xi - l > budget) l = std::nextafter(l, 1.0f);
    while (h - xi > budget) h = std::nextafter(h, 0.0f);
    lo[i] = std::max(std::min(l, xi), 0.0f);
    hi[i] = std::min(std::max(h, xi), 1.0f);
  }
}

void check_pixels(const Tensor& x) {
  for (float v : x.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::domain_error("attack input pixel outside [0,1]");
    }
  }
}

}  // namespace

Tensor project(const Tensor& delta, float budget, const Tensor& x) {
  require_same_shape(delta, x, "project");
  Tensor lo, hi;
  feasible_bounds(x, budget, lo, hi);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float d = std::clamp(delta[i], -budget, budget);
    const float v = std::clamp(x[i] + d, lo[i], hi[i]);
    out[i] = v - x[i];
  }
  return out;
}

CraftResult craft(const FeatureObjective& objective, const Tensor& clean, const AttackConfig& config) {
  config.validate();
  check_pixels(clean);
  const std::size_t rows = clean.dim(0);
  const std::size_t stride = clean.size() / rows;
  Tensor lo, hi;
  feasible_bounds(clean, config.budget, lo, hi);

  Tensor current = clean;
  ObjectiveEval eval = objective(current);
  CraftResult result;
  result.adversarial = current;
  result.initial_objective = eval.values;
  result.final_objective = eval.values;

  for (std::size_t it = 0; it < config.iterations; ++it) {
    for (std::size_t i = 0; i < current.size(); ++i) {
      const float g = eval.grad[i];
      float step;
      if (config.step_rule == StepRule::kSignedGradient) {
        step = g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
      } else {
        step = g;
      }
      current[i] = std::clamp(current[i] - config.step_size * step, lo[i], hi[i]);
    }
    eval = objective(current);
    for (std::size_t n = 0; n < rows; ++n) {
      if (eval.values[n] < result.final_objective[n]) {
        result.final_objective[n] = eval.values[n];
        std::copy(current.data() + n * stride, current.data() + (n + 1) * stride,
                  result.adversarial.data() + n * stride);
      }
    }
  }

  result.linf.assign(rows, 0.0f);
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t i = n * stride; i < (n + 1) * stride; ++i) {
      result.linf[n] = std::max(result.linf[n], std::abs(result.adversarial[i] - clean[i]));
    }
  }
  return result;
}

CraftResult craft(const ModelSpec& spec, const ParamSet& pretrained, const Tensor& clean,
                  const AttackConfig& config, const std::vector<std::size_t>& targets) {
  if (clean.rank() != 4 || targets.size() != clean.dim(0)) {
    throw ShapeError("craft: need one target per image of a [N,C,H,W] batch");
  }
  const Tensor target_matrix = one_hot_targets(targets, spec.feature_dim(), config.magnitude);
  const FeatureObjective objective = [&](const Tensor& images) {
    return attack_objective(spec, pretrained, images, target_matrix);
  };
  return craft(objective, clean, config);
}

std::size_t target_for(const AttackConfig& config, std::size_t index, std::size_t feature_dim) {
  if (config.target_policy == TargetPolicy::kFixed) return config.fixed_target;
  Rng rng = make_rng(config.seed, {tag(Stream::kAttackTarget), index});
  std::uniform_int_distribution<std::size_t> pick(0, feature_dim - 1);
  return pick(rng);
}

AdversarialBatch batch_attack(const ModelSpec& spec, const ParamSet& pretrained,
                              const Corpus& corpus, const AttackConfig& config, std::size_t chunk) {
  config.validate();
  corpus.validate();
  if (chunk == 0) chunk = 1;
  AdversarialBatch out;
  out.images = Tensor(corpus.images.shape());
  const std::size_t stride = element_count(corpus.sample_shape());
  for (std::size_t first = 0; first < corpus.size(); first += chunk) {
    const std::size_t count = std::min(chunk, corpus.size() - first);
    std::vector<std::size_t> indices(count), targets(count);
    for (std::size_t k = 0; k < count; ++k) {
      indices[k] = first + k;
      targets[k] = target_for(config, first + k, spec.feature_dim());
    }
    CraftResult r;
    try {
      r = craft(spec, pretrained, corpus.gather(indices), config, targets);
    } catch (const std::exception& e) {
      throw std::runtime_error("attack failed on images " + std::to_string(first) + ".." +
                               std::to_string(first + count - 1) + ": " + e.what());
    }
    std::copy(r.adversarial.data(), r.adversarial.data() + count * stride,
              out.images.data() + first * stride);
    for (std::size_t k = 0; k < count; ++k) {
      out.source_index.push_back(first + k);
      out.target_index.push_back(targets[k]);
      out.initial_objective.push_back(r.initial_objective[k]);
      out.final_objective.push_back(r.final_objective[k]);
      out.linf.push_back(r.linf[k]);
    }
  }
  return out;
}

std::size_t audit_constraints(const AdversarialBatch& batch, const Corpus& corpus, float budget) {
  if (batch.size() != corpus.size() || batch.images.shape() != corpus.images.shape()) {
    throw ShapeError("adversarial batch is not aligned with the corpus");
  }
  const std::size_t stride = element_count(corpus.sample_shape());
  std::size_t violations = 0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const std::size_t src = batch.source_index[n];
    bool ok = src < corpus.size();
    for (std::size_t i = 0; ok && i < stride; ++i) {
      const float a = batch.images[n * stride + i];
      const float x = corpus.images[src * stride + i];
      ok = a >= 0.0f && a <= 1.0f && std::abs(a - x) <= budget;
    }
    if (!ok) ++violations;
  }
  return violations;
}

namespace {

std::string serialize_attack_config(const AttackConfig& c) {
  std::ostringstream os;
  os << "# attack.budget = " << text::number(c.budget) << '\n'
     << "# attack.iterations = " << c.iterations << '\n'
     << "# attack.step_size = " << text::number(c.step_size) << '\n'
     << "# attack.magnitude = " << text::number(c.magnitude) << '\n'
     << "# attack.target = "
     << (c.target_policy == TargetPolicy::kFixed ? std::to_string(c.fixed_target)
                                                 : std::string("random"))
     << '\n'
     << "# attack.seed = " << c.seed << '\n'
     << "# attack.step_rule = " << to_string(c.step_rule) << '\n';
  return os.str();
}

constexpr const char* kCacheHeader =
    "source_index,target_index,final_objective,linf_norm,initial_objective";

std::string cache_file_name(std::size_t index) { return std::to_string(index) + ".rten"; }

}  // namespace

void write_attack_cache(const AdversarialBatch& batch, const AttackConfig& config,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const Shape sample{batch.images.dim(1), batch.images.dim(2), batch.images.dim(3)};
  const std::size_t stride = element_count(sample);
  std::ostringstream manifest;
  manifest << serialize_attack_config(config) << kCacheHeader << '\n';
  for (std::size_t n = 0; n < batch.size(); ++n) {
    std::vector<float> values(batch.images.data() + n * stride,
                              batch.images.data() + (n + 1) * stride);
    save_raw_tensor(Tensor(sample, std::move(values)), dir / cache_file_name(batch.source_index[n]));
    manifest << batch.source_index[n] << ',' << batch.target_index[n] << ','
             << text::number(batch.final_objective[n]) << ',' << text::number(batch.linf[n]) << ','
             << text::number(batch.initial_objective[n]) << '\n';
  }
  const std::string body = manifest.str();
  write_file(dir / "manifest.txt",
             {reinterpret_cast<const std::uint8_t*>(body.data()), body.size()});
}

AdversarialBatch read_attack_cache(const std::filesystem::path& dir, AttackConfig* config) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw FormatError(FormatErrorCode::kIo, "missing attack manifest in " + dir.string());
  std::map<std::string, std::string> settings;
  std::string line;
  bool header_seen = false;
  AdversarialBatch batch;
  std::vector<float> values;
  Shape sample;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto body = std::string_view(line).substr(1);
      const auto eq = body.find('=');
      if (eq != std::string_view::npos) {
        settings[std::string(text::trim(body.substr(0, eq)))] = std::string(text::trim(body.substr(eq + 1)));
      }
      continue;
    }
    if (!header_seen) {
      if (text::trim(line) != kCacheHeader) {
        throw FormatError(FormatErrorCode::kStructure, "unexpected attack manifest header: " + line);
      }
      header_seen = true;
      continue;
    }
    const auto fields = text::split(line, ',');
    const auto src = fields.size() == 5 ? text::parse_u64(fields[0]) : std::nullopt;
    const auto tgt = fields.size() == 5 ? text::parse_u64(fields[1]) : std::nullopt;
    const auto fin = fields.size() == 5 ? text::parse_double(fields[2]) : std::nullopt;
    const auto inf = fields.size() == 5 ? text::parse_double(fields[3]) : std::nullopt;
    const auto ini = fields.size() == 5 ? text::parse_double(fields[4]) : std::nullopt;
    if (!src || !tgt || !fin || !inf || !ini) {
      throw FormatError(FormatErrorCode::kStructure,
                        "attack manifest line " + std::to_string(line_no) + " is malformed");
    }
    const Tensor image = load_raw_tensor(dir / cache_file_name(*src));
    if (sample.empty()) sample = image.shape();
    if (image.shape() != sample) throw FormatError(FormatErrorCode::kStructure, "mixed cache shapes");
    values.insert(values.end(), image.values().begin(), image.values().end());
    batch.source_index.push_back(*src);
    batch.target_index.push_back(*tgt);
    batch.final_objective.push_back(*fin);
    batch.linf.push_back(static_cast<float>(*inf));
    batch.initial_objective.push_back(*ini);
  }
  if (!header_seen || batch.size() == 0) {
    throw FormatError(FormatErrorCode::kStructure, "attack manifest has no rows");
  }
  Shape shape = sample;
  shape.insert(shape.begin(), batch.size());
  batch.images = Tensor(std::move(shape), std::move(values));
  if (config) {
    AttackConfig c;
    auto num = [&](const char* key) {
      auto it = settings.find(key);
      if (it == settings.end()) throw FormatError(FormatErrorCode::kStructure, std::string("cache lacks ") + key);
      auto v = text::parse_double(it->second);
      if (!v) throw FormatError(FormatErrorCode::kStructure, std::string("bad value for ") + key);
      return *v;
    };
    c.budget = static_cast<float>(num("attack.budget"));
    c.iterations = static_cast<std::size_t>(num("attack.iterations"));
    c.step_size = static_cast<float>(num("attack.step_size"));
    c.magnitude = static_cast<float>(num("attack.magnitude"));
    c.seed = text::parse_u64(settings["attack.seed"]).value_or(0);
    const std::string target = settings["attack.target"];
    if (target == "random") {
      c.target_policy = TargetPolicy::kRandomPerImage;
    } else {
      c.target_policy = TargetPolicy::kFixed;
      c.fixed_target = text::parse_u64(target).value_or(0);
    }
    c.step_rule = settings["attack.step_rule"] == "raw_gradient" ? StepRule::kRawGradient
                                                                  : StepRule::kSignedGradient;
    *config = c;
  }
  return batch;
}

}  // namespace renofeat
