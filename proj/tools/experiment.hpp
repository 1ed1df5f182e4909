// SPDX-License-Identifier: Apache-2.0
//
// The experiment description shared by the command-line tool and the
// acceptance runner: model shape, source and target tasks, schedules, the
// attack, and sweep axes, all read from one flat config file.
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "renofeat/attack.hpp"
#include "renofeat/config.hpp"
#include "renofeat/data.hpp"
#include "renofeat/eval.hpp"
#include "renofeat/model.hpp"
#include "renofeat/transfer.hpp"

namespace renofeat::cli {

struct TaskSettings {
  std::size_t classes = 0;
  std::size_t train_per_class = 0;
  std::size_t test_per_class = 0;
  std::size_t class_offset = 0;
  std::uint64_t seed = 0;
  double domain_shift = 0.0;
};

struct Experiment {
  std::uint64_t seed = 1;

  std::size_t image_size = 16;
  std::vector<std::size_t> widths = {16, 32, 64};
  std::size_t convs = 1;

  std::uint64_t catalog_seed = 7;
  TaskSettings source{8, 200, 50, 0, 100, 0.0};
  TaskSettings target{6, 100, 50, 8, 200, 0.0};

  std::uint64_t pretrain_seed = 5;
  std::size_t pretrain_iterations = 3000;
  std::size_t pretrain_batch_size = 32;
  float pretrain_lr = 0.01f;
  float pretrain_momentum = 0.9f;
  float pretrain_weight_decay = 0.005f;

  std::size_t finetune_iterations = 600;
  std::size_t retrain_iterations = 1800;
  std::size_t batch_size = 32;
  float lr = 0.01f;
  float momentum = 0.9f;
  float finetune_weight_decay = 0.0f;
  float retrain_weight_decay = 0.005f;
  float beta = 0.01f;
  float lambda_weight = 0.01f;       // L2SP
  float lambda_feat = 1.0f;          // DELTA
  float lambda_feat_reinit = 0.1f;   // DELTA-R and Renofeation
  float dropout_rate = 0.1f;         // Renofeation
  std::size_t swa_average_every = 50;
  std::size_t log_every = 50;
  std::size_t probe_size = 64;

  AttackConfig attack;  // seed is replaced by the experiment seed

  std::string sweep_axis = "lambda_feat";
  std::string sweep_method = "delta_r";
  std::vector<double> sweep_lr = {0.01, 0.005};
  std::vector<double> sweep_momentum = {0.0, 0.9};
  std::vector<double> sweep_weight_decay = {0.0, 1e-4};
  std::vector<double> sweep_lambda_feat = {0.1, 0.5, 1.0, 5.0, 10.0};
  std::vector<double> sweep_fractions = {0.33, 0.66, 1.0};
  std::vector<std::string> sweep_fraction_methods = {"retrain", "renofeation"};

  /// Reads every recognised key, keeping defaults for absent ones. Unknown
  /// keys and out-of-range values throw ConfigError.
  static Experiment from_config(const Config& config);
  /// Every setting, defaults included, as a config that reads back to *this.
  Config to_config() const;
  static const std::set<std::string>& known_keys();

  TaskSpec source_task() const;
  /// The target task for the current seed: render seed target.seed + seed.
  TaskSpec target_task() const;
  ModelSpec architecture(std::size_t num_classes) const;
  TransferConfig pretrain_config() const;
  TransferConfig transfer_config(Method method) const;
  AttackConfig attack_config() const;
};

// Pipeline steps with no file-system side effects.

struct PretrainOutcome {
  ParamSet params;
  TrainLog log;
  double source_test_top1 = 0.0;
};

PretrainOutcome pretrain(const Experiment& exp);

struct TargetData {
  Corpus train;
  Corpus test;
};

/// The target task's train and test split; `fraction` < 1 subsamples the
/// training split per class with the experiment seed.
TargetData target_data(const Experiment& exp, double fraction = 1.0);

AdversarialBatch attack_target(const Experiment& exp, const ParamSet& pretrained, const Corpus& test);

/// Clean accuracy, ASR against `adv`, and both distances to the pretrained
/// model (feature distance over the training split).
EvalReport evaluate_model(const Experiment& exp, const std::string& method, const std::string& cell,
                          const ParamSet& model, const ParamSet& pretrained, const TargetData& data,
                          const AdversarialBatch& adv);

}  // namespace renofeat::cli
