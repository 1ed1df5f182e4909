// SPDX-License-Identifier: Apache-2.0
//
// Transfer objective shared by all methods:
//
//   mean_i CE(head(f(x_i; theta)), y_i) + R(theta0, theta, x_i) + beta ||theta_linear||^2
//
// with R = lambda_weight ||theta - theta0||^2 (L2SP), or
//      R = lambda_feat sum_l ||f_l(x; theta) - f_l(x; theta0)||^2 / n_l (feature distillation),
// or zero. Methods differ in initialization, which terms are active, and
// whether spatial dropout and weight averaging are used.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "renofeat/attack.hpp"
#include "renofeat/data.hpp"
#include "renofeat/graph.hpp"
#include "renofeat/model.hpp"

namespace renofeat {

enum class Method { kLinear, kFinetune, kL2sp, kDelta, kRetrain, kDeltaR, kRenofeation };

const char* to_string(Method method);
/// Accepts the lower-case names used on the command line ("delta_r", "renofeation", ...).
Method parse_method(std::string_view name);
inline constexpr Method kAllMethods[] = {Method::kLinear, Method::kFinetune, Method::kL2sp,
                                         Method::kDelta,  Method::kRetrain,  Method::kDeltaR,
                                         Method::kRenofeation};

/// True for methods that start from the pre-trained backbone.
bool starts_from_pretrained(Method method);
/// True for methods that need theta0 at all (everything except re-training).
bool needs_pretrained(Method method);

struct SwaConfig {
  float lr = 0.005f;
  std::size_t iterations = 0;
  std::size_t average_every = 50;
  friend bool operator==(const SwaConfig&, const SwaConfig&) = default;
};

struct AdvTrainConfig {
  std::size_t pgd_steps = 3;
  double mix_prob = 0.5;
  double iteration_multiplier = 2.0;
  AttackConfig attack;  // budget, step and magnitude of the crafting attack
  friend bool operator==(const AdvTrainConfig&, const AdvTrainConfig&) = default;
};

struct TransferConfig {
  Method method = Method::kFinetune;
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
  std::size_t iterations = 3000;
  std::size_t batch_size = 64;
  float beta = 0.01f;
  float lambda_weight = 0.0f;
  float lambda_feat = 0.0f;
  float dropout_rate = 0.0f;
  std::optional<SwaConfig> swa;
  std::optional<AdvTrainConfig> adv_train;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  std::size_t probe_size = 64;

  /// Desk-scale defaults for `method`.
  static TransferConfig defaults(Method method, std::uint64_t seed = 0);

  /// Throws std::invalid_argument if the method/hyper-parameter combination
  /// breaks a method invariant (e.g. L2SP with a feature weight).
  void validate() const;
  friend bool operator==(const TransferConfig&, const TransferConfig&) = default;
};

/// lambda * sum over backbone tensors of ||theta - theta0||^2. The head is excluded.
NodeId l2sp_penalty(Graph& graph, std::span<const NodeId> theta, std::span<const NodeId> theta0,
                    double lambda_weight);
double l2sp_penalty(const std::vector<NamedTensor>& theta, const std::vector<NamedTensor>& theta0,
                    double lambda_weight);

/// lambda * sum_l ||student_l - teacher_l||^2 / (n_l * N) for [N, ...] hook
/// tensors, where n_l is the per-sample element count of hook l.
NodeId feature_distill_penalty(Graph& graph, std::span<const NodeId> student,
                               std::span<const NodeId> teacher, double lambda_feat);
double feature_distill_penalty(const std::vector<Tensor>& student,
                               const std::vector<Tensor>& teacher, double lambda_feat);

/// Running uniform average of parameter snapshots.
struct SwaState {
  ParamSet average;
  std::size_t count = 0;
};

void swa_update(SwaState& state, const ParamSet& snapshot);

struct TrainRecord {
  std::size_t iteration = 0;
  double task_loss = 0.0;
  double reg_loss = 0.0;
  double linear_reg = 0.0;
  double probe_feature_loss = 0.0;  // 0 when the method has no teacher
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::size_t main_iterations = 0;  // records past this index belong to the SWA phase
  std::size_t swa_snapshots = 0;

  /// Header row then `iteration,task_loss,reg_loss,linear_reg,probe_feature_loss`.
  std::string to_csv() const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ParamSet params;
  TrainLog log;
  double final_probe_feature_loss = 0.0;  // on the returned parameters
};

/// Runs one transfer method on `train`. `architecture` supplies the backbone
/// structure; its class count is replaced by the corpus class count. The
/// pre-trained set is required unless the method is re-training, which
/// ignores it entirely.
TrainResult train(const TransferConfig& config, const ModelSpec& architecture, const Corpus& train,
                  const ParamSet* pretrained);

/// Indices of the fixed probe batch used for logged feature losses.
std::vector<std::size_t> probe_indices(const Corpus& corpus, std::size_t probe_size);

/// Feature distillation loss (lambda = 1) of `params` against the teacher
/// over the given images. With a positive dropout rate the student runs in
/// train mode and the loss is averaged over kProbeDraws masks drawn from
/// `seed`, so it measures the noisy objective the method actually trains on.
inline constexpr std::size_t kProbeDraws = 8;
double probe_feature_loss(const ModelSpec& spec, const ParamSet& params, const ParamSet& teacher,
                          const Tensor& images, float dropout_rate = 0.0f, std::uint64_t seed = 0);

struct Grid {
  std::vector<float> lr;
  std::vector<float> momentum;
  std::vector<float> weight_decay;
  std::vector<float> lambda_feat;  // used alone for a feature-weight sweep

  /// Cell configurations in lexicographic axis order.
  std::vector<TransferConfig> cells(const TransferConfig& base) const;
};

struct GridCell {
  TransferConfig config;
  double val_clean_top1 = 0.0;
};

struct GridResult {
  TransferConfig best_config;
  ParamSet best_params;
  std::vector<GridCell> table;
};

/// Trains every cell with a seed derived from the base seed and the cell
/// index, keeping the cell with the best validation accuracy (first wins ties).
GridResult grid_search(const TransferConfig& base, const Grid& grid, const ModelSpec& architecture,
                       const Corpus& train, const Corpus& val, const ParamSet* pretrained);

}  // namespace renofeat
