// SPDX-License-Identifier: Apache-2.0
//
// Feature-space L-infinity PGD against the pre-trained backbone only:
//
//   minimize_delta  || f_K(x + delta; theta0) - m * onehot(target) ||^2
//   subject to      ||delta||_inf <= B,  x + delta in [0,1]
//
// where f_K is the pooled penultimate feature. The transferred model is never
// consulted.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "renofeat/data.hpp"
#include "renofeat/model.hpp"
#include "renofeat/tensor.hpp"

namespace renofeat {

enum class TargetPolicy { kRandomPerImage, kFixed };
enum class StepRule { kSignedGradient, kRawGradient };

const char* to_string(TargetPolicy policy);
const char* to_string(StepRule rule);

struct AttackConfig {
  float budget = 0.1f;
  std::size_t iterations = 40;
  float step_size = 0.01f;
  float magnitude = 1000.0f;
  TargetPolicy target_policy = TargetPolicy::kRandomPerImage;
  std::size_t fixed_target = 0;
  std::uint64_t seed = 0;
  StepRule step_rule = StepRule::kSignedGradient;

  void validate() const;
  friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

/// Objective value per image and the gradient with respect to the images.
struct ObjectiveEval {
  std::vector<double> values;
  Tensor grad;
};

/// Evaluates the attack objective for a batch of candidate images.
using FeatureObjective = std::function<ObjectiveEval(const Tensor& images)>;

/// Sum over each row of (penultimate(x) - target)^2 through the frozen model.
/// `targets` is [N, D] with D the penultimate width.
ObjectiveEval attack_objective(const ModelSpec& spec, const ParamSet& pretrained,
                               const Tensor& images, const Tensor& targets);

/// m * onehot(index) rows as an [N, D] target matrix.
Tensor one_hot_targets(const std::vector<std::size_t>& indices, std::size_t dim, float magnitude);

/// Clamps delta into [-budget, budget] and then x + delta into [0, 1]; returns
/// the adjusted perturbation. The returned delta satisfies |delta| <= budget
/// and x + delta in [0,1] exactly in float arithmetic.
Tensor project(const Tensor& delta, float budget, const Tensor& x);

struct CraftResult {
  Tensor adversarial;  // same shape as the clean input
  std::vector<double> initial_objective;
  std::vector<double> final_objective;  // objective at the returned (best) iterate
  std::vector<float> linf;
};

/// PGD over a batch of independent images. Each image keeps the iterate with
/// the lowest objective seen, starting from delta = 0.
CraftResult craft(const FeatureObjective& objective, const Tensor& clean, const AttackConfig& config);

/// Crafts against the pre-trained model with explicit target neurons.
CraftResult craft(const ModelSpec& spec, const ParamSet& pretrained, const Tensor& clean,
                  const AttackConfig& config, const std::vector<std::size_t>& targets);

/// Target neuron for corpus image `index` under `config`.
std::size_t target_for(const AttackConfig& config, std::size_t index, std::size_t feature_dim);

struct AdversarialBatch {
  Tensor images;
  std::vector<std::size_t> source_index;
  std::vector<std::size_t> target_index;
  std::vector<double> initial_objective;
  std::vector<double> final_objective;
  std::vector<float> linf;

  std::size_t size() const noexcept { return source_index.size(); }
};

/// Attacks every image of the corpus, chunked into batches of `chunk` images.
AdversarialBatch batch_attack(const ModelSpec& spec, const ParamSet& pretrained,
                              const Corpus& corpus, const AttackConfig& config,
                              std::size_t chunk = 64);

/// Verifies every image against the budget and pixel range with zero tolerance.
/// Returns the number of violating images.
std::size_t audit_constraints(const AdversarialBatch& batch, const Corpus& corpus, float budget);

/// Cache layout: `<source_index>.rten` per image plus `manifest.txt`.
void write_attack_cache(const AdversarialBatch& batch, const AttackConfig& config,
                        const std::filesystem::path& dir);
AdversarialBatch read_attack_cache(const std::filesystem::path& dir, AttackConfig* config = nullptr);

}  // namespace renofeat
