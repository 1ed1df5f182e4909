// SPDX-License-Identifier: Apache-2.0
#include "renofeat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "renofeat/text.hpp"

namespace renofeat {

std::vector<int> predict(const ModelSpec& spec, const ParamSet& params, const Tensor& images,
                         std::size_t chunk) {
  const std::size_t m = images.dim(0);
  std::vector<int> out;
  out.reserve(m);
  for (std::size_t first = 0; first < m; first += chunk) {
    const std::size_t count = std::min(chunk, m - first);
    const Tensor logits = forward(spec, params, images.slice_rows(first, count)).logits;
    const std::size_t k = logits.dim(1);
    for (std::size_t n = 0; n < count; ++n) {
      const float* row = logits.data() + n * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

std::size_t Accuracy::correct_count() const {
  return static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true));
}

Accuracy clean_accuracy(const ModelSpec& spec, const ParamSet& params, const Corpus& corpus) {
  if (corpus.size() == 0) throw DataError(DataErrorCode::kEmptyCorpus, "clean accuracy of an empty corpus");
  const auto pred = predict(spec, params, corpus.images);
  Accuracy acc;
  acc.correct.resize(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) acc.correct[i] = pred[i] == corpus.labels[i];
  acc.percent = 100.0 * static_cast<double>(acc.correct_count()) / static_cast<double>(corpus.size());
  return acc;
}

double attack_success_rate(const std::vector<int>& labels, const std::vector<int>& clean_pred,
                           const std::vector<int>& adv_pred) {
  if (clean_pred.size() != labels.size() || adv_pred.size() != labels.size()) {
    throw std::invalid_argument("attack success rate: prediction counts do not match labels");
  }
  std::size_t eligible = 0, fooled = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (clean_pred[i] != labels[i]) continue;
    ++eligible;
    if (adv_pred[i] != labels[i]) ++fooled;
  }
  if (eligible == 0) {
    throw UndefinedMetricError("attack success rate is undefined: no sample is classified correctly");
  }
  return 100.0 * static_cast<double>(fooled) / static_cast<double>(eligible);
}

double attack_success_rate(const ModelSpec& spec, const ParamSet& params, const Corpus& corpus,
                           const AdversarialBatch& adv) {
  if (adv.size() != corpus.size() || adv.images.shape() != corpus.images.shape()) {
    throw std::invalid_argument("adversarial cache holds " + std::to_string(adv.size()) +
                                " images for a corpus of " + std::to_string(corpus.size()));
  }
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (adv.source_index[i] != i) {
      throw std::invalid_argument("adversarial cache row " + std::to_string(i) +
                                  " refers to source image " + std::to_string(adv.source_index[i]));
    }
  }
  return attack_success_rate(corpus.labels, predict(spec, params, corpus.images),
                             predict(spec, params, adv.images));
}

double weight_distance(const std::vector<NamedTensor>& theta,
                       const std::vector<NamedTensor>& theta0) {
  if (theta.size() != theta0.size()) {
    throw ShapeError("weight distance: tensor counts differ");
  }
  std::map<std::string, const Tensor*> reference;
  for (const auto& t : theta0) reference[t.name] = &t.value;
  std::map<std::string, const Tensor*> current;
  for (const auto& t : theta) current[t.name] = &t.value;
  double sum = 0.0;
  for (const auto& [name, value] : current) {
    auto it = reference.find(name);
    if (it == reference.end()) throw ShapeError("weight distance: no reference tensor '" + name + "'");
    require_same_shape(*value, *it->second, "weight distance");
    sum += squared_distance(value->values(), it->second->values());
  }
  return std::sqrt(sum);
}

double feature_distance(const ModelSpec& spec, const ParamSet& model, const ParamSet& pretrained,
                        const Corpus& corpus, std::size_t chunk) {
  if (corpus.size() == 0) throw DataError(DataErrorCode::kEmptyCorpus, "feature distance of an empty corpus");
  if (model.backbone.size() != pretrained.backbone.size()) {
    throw ShapeError("feature distance: models have different backbones");
  }
  for (std::size_t i = 0; i < model.backbone.size(); ++i) {
    require_same_shape(model.backbone[i].value, pretrained.backbone[i].value, "feature distance");
  }
  double total = 0.0;
  for (std::size_t first = 0; first < corpus.size(); first += chunk) {
    const std::size_t count = std::min(chunk, corpus.size() - first);
    const Tensor batch = corpus.images.slice_rows(first, count);
    const auto student = forward(spec, model, batch).stage_features;
    const auto teacher = forward(spec, pretrained, batch).stage_features;
    for (std::size_t l = 0; l < student.size(); ++l) {
      const double n_l = static_cast<double>(student[l].size() / count);
      total += squared_distance(student[l].values(), teacher[l].values()) / n_l;
    }
  }
  return total / static_cast<double>(corpus.size());
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double rank_correlation(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("rank correlation: length mismatch");
  if (xs.size() < 3) throw UndefinedMetricError("rank correlation needs at least three pairs");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw UndefinedMetricError("rank correlation is undefined for a constant input");
  }
  return sxy / std::sqrt(sxx * syy);
}

EvalReport aggregate(const std::vector<EvalReport>& rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate needs at least one row");
  EvalReport out;
  out.method = rows.front().method;
  out.dataset = rows.size() == 1 ? rows.front().dataset : "average";
  out.cell = rows.front().cell;
  double clean = 0.0, asr = 0.0, wd = 0.0, fd = 0.0;
  for (const auto& r : rows) {
    if (r.method != out.method) {
      throw std::invalid_argument("aggregate mixes methods '" + out.method + "' and '" + r.method + "'");
    }
    if (r.cell != out.cell) out.cell = "-";
    clean += r.clean_top1;
    asr += r.asr;
    wd += r.weight_distance;
    fd += r.feature_distance;
    out.n_samples += r.n_samples;
    out.n_clean_correct += r.n_clean_correct;
  }
  const double k = static_cast<double>(rows.size());
  if (rows.size() == 1) return rows.front();
  out.clean_top1 = clean / k;
  out.asr = asr / k;
  out.weight_distance = wd / k;
  out.feature_distance = fd / k;
  return out;
}

std::string format_report_row(const EvalReport& r) {
  std::ostringstream os;
  os << r.method << ',' << r.dataset << ',' << (r.cell.empty() ? "-" : r.cell) << ','
     << text::number(r.clean_top1) << ',' << text::number(r.asr) << ','
     << text::number(r.weight_distance) << ',' << text::number(r.feature_distance) << ','
     << r.n_samples << ',' << r.n_clean_correct;
  return os.str();
}

std::string format_report_table(const std::vector<EvalReport>& rows) {
  std::string out(kReportHeader);
  out += '\n';
  for (const auto& r : rows) out += format_report_row(r) + '\n';
  return out;
}

std::vector<EvalReport> parse_report_table(std::string_view body) {
  std::vector<EvalReport> rows;
  std::size_t line_no = 0;
  bool header = false;
  std::istringstream in{std::string(body)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    if (!header) {
      if (text::trim(line) != kReportHeader) {
        throw std::runtime_error("report table line " + std::to_string(line_no) +
                                 ": unexpected header '" + line + "'");
      }
      header = true;
      continue;
    }
    const auto f = text::split(line, ',');
    auto fail = [&]() {
      return std::runtime_error("report table line " + std::to_string(line_no) + " is malformed");
    };
    if (f.size() != 9) throw fail();
    EvalReport r;
    r.method = f[0];
    r.dataset = f[1];
    r.cell = f[2];
    const auto clean = text::parse_double(f[3]);
    const auto asr = text::parse_double(f[4]);
    const auto wd = text::parse_double(f[5]);
    const auto fd = text::parse_double(f[6]);
    const auto ns = text::parse_u64(f[7]);
    const auto nc = text::parse_u64(f[8]);
    if (!clean || !asr || !wd || !fd || !ns || !nc) throw fail();
    r.clean_top1 = *clean;
    r.asr = *asr;
    r.weight_distance = *wd;
    r.feature_distance = *fd;
    r.n_samples = *ns;
    r.n_clean_correct = *nc;
    rows.push_back(std::move(r));
  }
  if (!header) throw std::runtime_error("report table is empty");
  return rows;
}

}  // namespace renofeat
