// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "renofeat/attack.hpp"
#include "renofeat/data.hpp"
#include "renofeat/model.hpp"

namespace renofeat {

/// A metric whose definition does not cover the given inputs, such as an
/// attack success rate over zero clean-correct samples.
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Eval-mode argmax predictions; ties go to the lowest class index.
std::vector<int> predict(const ModelSpec& spec, const ParamSet& params, const Tensor& images,
                         std::size_t chunk = 128);

struct Accuracy {
  double percent = 0.0;
  std::vector<bool> correct;
  std::size_t correct_count() const;
};

Accuracy clean_accuracy(const ModelSpec& spec, const ParamSet& params, const Corpus& corpus);

/// 100 * P(adversarial prediction wrong | clean prediction right). The batch
/// must be aligned 1:1 with the corpus.
double attack_success_rate(const ModelSpec& spec, const ParamSet& params, const Corpus& corpus,
                           const AdversarialBatch& adv);

/// Same quantity from precomputed predictions.
double attack_success_rate(const std::vector<int>& labels, const std::vector<int>& clean_pred,
                           const std::vector<int>& adv_pred);

/// L2 distance between two backbones. Tensors are matched and summed by name,
/// so the result does not depend on their order.
double weight_distance(const std::vector<NamedTensor>& theta,
                       const std::vector<NamedTensor>& theta0);

/// Mean over the corpus of sum_l ||f_l(x; model) - f_l(x; pretrained)||^2 / n_l
/// with both models in eval mode.
double feature_distance(const ModelSpec& spec, const ParamSet& model, const ParamSet& pretrained,
                        const Corpus& corpus, std::size_t chunk = 64);

/// Spearman correlation with average ranks for ties. Throws
/// UndefinedMetricError for fewer than three pairs or a constant input.
double rank_correlation(const std::vector<double>& xs, const std::vector<double>& ys);

struct EvalReport {
  std::string method;
  std::string dataset;
  std::string cell;  // free-form sweep cell label, "-" when unused
  double clean_top1 = 0.0;
  double asr = 0.0;
  double weight_distance = 0.0;
  double feature_distance = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_clean_correct = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Unweighted mean of every metric over the rows. All rows must share a
/// method; the dataset of the result is "average".
EvalReport aggregate(const std::vector<EvalReport>& rows);

inline constexpr std::string_view kReportHeader =
    "method,dataset,cell,clean_top1,asr,weight_distance,feature_distance,n_samples,n_clean_correct";

std::string format_report_row(const EvalReport& row);
std::string format_report_table(const std::vector<EvalReport>& rows);
/// Parses a table produced by format_report_table. Throws std::runtime_error
/// naming the line on a wrong header or malformed row.
std::vector<EvalReport> parse_report_table(std::string_view text);

}  // namespace renofeat
