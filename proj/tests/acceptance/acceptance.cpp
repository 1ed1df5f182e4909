// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   acceptance --unit-tests <path> [--config <file>] [--work <dir>] [--seeds 1,2,3]

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "experiment.hpp"
#include "renofeat/io.hpp"
#include "renofeat/text.hpp"

using namespace renofeat;
using namespace renofeat::cli;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kGradientSuiteSeconds = 120.0;
constexpr double kRetrainAsrMax = 20.0;
constexpr double kLinearAsrMin = 60.0;
constexpr double kCleanMargin = 3.0;
constexpr double kAsrRatio = 3.0;
constexpr double kSpearmanMin = 0.5;
constexpr std::size_t kMinCorrelationCells = 15;
constexpr int kAllowedInversions = 1;
constexpr double kSmallFraction = 0.33;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  verdicts.push_back({id, name, pass, detail});
  std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << name << "): " << detail << std::endl;
}

void note(const std::string& line) { std::cout << "      " << line << std::endl; }

int run_process(const std::string& command, double* elapsed) {
  const auto t0 = Clock::now();
  const int status = std::system(command.c_str());
  if (elapsed) *elapsed = seconds_since(t0);
  return status;
}

// One (method, seed) result on the default benchmark.
struct Cell {
  std::string method;
  std::uint64_t seed;
  EvalReport row;
  double probe_loss = 0.0;
};

double mean_of(const std::vector<Cell>& cells, const std::string& method,
               const std::function<double(const Cell&)>& field) {
  double s = 0.0;
  int n = 0;
  for (const auto& c : cells) {
    if (c.method == method) {
      s += field(c);
      ++n;
    }
  }
  return n ? s / n : std::nan("");
}

double asr_of(const Cell& c) { return c.row.asr; }
double clean_of(const Cell& c) { return c.row.clean_top1; }
double probe_of(const Cell& c) { return c.probe_loss; }

struct Benchmark {
  std::vector<Cell> main;       // the seven methods
  std::vector<Cell> ablation;   // DELTA-R with dropout only
  std::vector<Cell> lambda;     // DELTA-R feature-weight sweep, method = "lambda=<v>"
  std::vector<Cell> fraction;   // small-fraction runs, method = "<name>@0.33"
  std::size_t audited = 0;
  std::size_t violations = 0;
  std::size_t objective_increases = 0;
  double source_top1 = 0.0;
  double seconds = 0.0;
};

Benchmark run_benchmark(const Experiment& base, const std::vector<std::uint64_t>& seeds, std::ostream& log) {
  Benchmark b;
  const auto t0 = Clock::now();
  const PretrainOutcome pre = pretrain(base);
  b.source_top1 = pre.source_test_top1;
  log << "pretrain: source test top-1 " << fmt(pre.source_test_top1) << "% (" << fmt(seconds_since(t0), 1)
      << " s)\n";

  for (std::uint64_t seed : seeds) {
    Experiment exp = base;
    exp.seed = seed;
    const TargetData data = target_data(exp);
    const ModelSpec arch = exp.architecture(data.train.class_count);
    const AdversarialBatch adv = attack_target(exp, pre.params, data.test);
    b.audited += adv.size();
    b.violations += audit_constraints(adv, data.test, exp.attack.budget);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      if (!(adv.final_objective[i] <= adv.initial_objective[i])) ++b.objective_increases;
    }

    auto run = [&](const std::string& label, const TransferConfig& config, const TargetData& d) {
      const auto t = Clock::now();
      const TrainResult r = train(config, arch, d.train, &pre.params);
      Cell c{label, seed, evaluate_model(exp, label, "-", r.params, pre.params, TargetData{data.train, d.test}, adv),
             r.final_probe_feature_loss};
      log << "seed " << seed << "  " << label << ": clean " << fmt(c.row.clean_top1) << "  asr " << fmt(c.row.asr)
          << "  wd " << fmt(c.row.weight_distance, 3) << "  fd " << fmt(c.row.feature_distance, 4) << "  probe "
          << fmt(c.probe_loss, 4) << "  (" << fmt(seconds_since(t), 1) << " s)\n";
      log.flush();
      return c;
    };

    for (Method m : kAllMethods) b.main.push_back(run(to_string(m), exp.transfer_config(m), data));

    TransferConfig dropout_only = exp.transfer_config(Method::kDeltaR);
    dropout_only.dropout_rate = exp.dropout_rate;
    b.ablation.push_back(run("delta_r+dropout", dropout_only, data));

    for (double lambda : exp.sweep_lambda_feat) {
      TransferConfig c = exp.transfer_config(Method::kDeltaR);
      c.lambda_feat = static_cast<float>(lambda);
      if (c == exp.transfer_config(Method::kDeltaR)) {
        Cell same = b.main[b.main.size() - 2];  // the DELTA-R run above
        same.method = "lambda=" + text::number(lambda);
        b.lambda.push_back(same);
        continue;
      }
      b.lambda.push_back(run("lambda=" + text::number(lambda), c, data));
    }

    const TargetData small = target_data(exp, kSmallFraction);
    for (Method m : {Method::kRetrain, Method::kRenofeation}) {
      b.fraction.push_back(run(std::string(to_string(m)) + "@0.33", exp.transfer_config(m), small));
    }
  }
  b.seconds = seconds_since(t0);
  return b;
}

bool non_decreasing_with_inversions(const std::vector<double>& v, int allowed, int* inversions) {
  int count = 0;
  for (std::size_t i = 1; i < v.size(); ++i) count += v[i] < v[i - 1];
  *inversions = count;
  return count <= allowed;
}

// CLI pipeline run twice: every manifest replayed into a second root must
// reproduce its outputs bit for bit.
bool determinism_check(const fs::path& work, const Experiment& base, std::string* detail) {
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string first = (work / "first").string(), second = (work / "second").string();

  // Shortened schedules keep the pipeline run to a couple of minutes; the
  // sweep covers one data fraction and one method.
  Experiment exp = base;
  exp.pretrain_iterations = 300;
  exp.finetune_iterations = 60;
  exp.retrain_iterations = 120;
  exp.swa_average_every = 10;
  exp.log_every = 20;
  exp.attack.iterations = 10;
  const fs::path config_path = work / "pipeline.cfg";
  std::ofstream(config_path) << exp.to_config().serialize();
  exp.sweep_axis = "fraction";
  exp.sweep_fractions = {kSmallFraction};
  exp.sweep_fraction_methods = {"retrain"};
  const fs::path sweep_cfg = work / "sweep.cfg";
  std::ofstream(sweep_cfg) << exp.to_config().serialize();

  std::ostringstream sink, errors;
  auto cli = [&](std::vector<std::string> argv) {
    argv.insert(argv.begin(), {"renofeat", "--config", config_path.string(), "--out", first});
    std::vector<const char*> raw;
    for (const auto& a : argv) raw.push_back(a.c_str());
    if (run_cli(static_cast<int>(raw.size()), raw.data(), sink, errors) != 0) {
      throw std::runtime_error("renofeat " + argv[5] + " failed: " + errors.str());
    }
  };
  auto only = [&](const std::string& prefix) {
    for (const auto& e : fs::directory_iterator(first)) {
      const std::string name = e.path().filename().string();
      if (name.rfind(prefix, 0) == 0) return e.path();
    }
    throw std::runtime_error("no run directory " + prefix);
  };

  cli({"pretrain"});
  const std::string pre = (only("pretrain-") / "checkpoints/pretrained.rnfc").string();
  cli({"attack", "--pretrained", pre});
  const std::string adv = (only("attack-") / "caches/adv").string();
  for (const char* m : {"linear", "delta", "renofeation"}) cli({"transfer", "--method", m, "--pretrained", pre});
  std::vector<std::string> reports;
  for (const auto& e : fs::directory_iterator(first)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("transfer-", 0) != 0) continue;
    for (const auto& ck : fs::directory_iterator(e.path() / "checkpoints")) {
      cli({"evaluate", "--model", ck.path().string(), "--adv", adv, "--pretrained", pre});
    }
  }
  {
    std::vector<std::string> argv = {"renofeat", "--config", sweep_cfg.string(), "--out", first,
                                     "sweep",    "--pretrained", pre, "--adv", adv};
    std::vector<const char*> raw;
    for (const auto& a : argv) raw.push_back(a.c_str());
    if (run_cli(static_cast<int>(raw.size()), raw.data(), sink, errors) != 0) {
      throw std::runtime_error("renofeat sweep failed: " + errors.str());
    }
  }
  cli({"report", (fs::path(first) / "evaluate-*" / "tables/report.csv").string()});

  // RETRAIN must not depend on the pretrained checkpoint at all.
  cli({"transfer", "--method", "retrain", "--pretrained", pre});
  cli({"--seed", "1", "transfer", "--method", "retrain"});

  std::size_t manifests = 0, failures = 0;
  std::vector<fs::path> runs;
  for (const auto& e : fs::directory_iterator(first)) runs.push_back(e.path());
  std::sort(runs.begin(), runs.end());
  std::map<std::string, int> retrain_ckpts;
  for (const auto& dir : runs) {
    const std::string manifest = (dir / "manifest.json").string();
    std::vector<std::string> argv = {"renofeat", "--out", second, "replay", manifest};
    std::vector<const char*> raw;
    for (const auto& a : argv) raw.push_back(a.c_str());
    ++manifests;
    if (run_cli(static_cast<int>(raw.size()), raw.data(), sink, errors) != 0) ++failures;
    const fs::path ck = dir / "checkpoints/retrain.rnfc";
    if (fs::exists(ck)) ++retrain_ckpts[file_crc32(ck)];
  }
  const bool retrain_independent = retrain_ckpts.size() == 1 && retrain_ckpts.begin()->second == 2;
  *detail = std::to_string(manifests - failures) + "/" + std::to_string(manifests) +
            " manifests replayed bit-identically; retrain checkpoint identical with and without --pretrained: " +
            (retrain_independent ? "yes" : "no");
  if (failures != 0) *detail += "; " + errors.str();
  return failures == 0 && manifests >= 9 && retrain_independent;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string unit_tests, config_path, work = "acceptance_work", seed_list = "1,2,3";
  app.add_option("--unit-tests", unit_tests, "Path to the unit test binary")->required();
  app.add_option("--config", config_path, "Benchmark config")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--seeds", seed_list, "Comma separated experiment seeds");
  CLI11_PARSE(app, argc, argv);

  std::vector<std::uint64_t> seeds;
  for (const auto& s : text::split(seed_list, ',')) seeds.push_back(*text::parse_u64(s));
  const Experiment base = Experiment::from_config(Config::load(config_path));
  fs::create_directories(work);
  const auto t_all = Clock::now();

  // 1. Gradient checks.
  {
    double elapsed = 0.0;
    const int status = run_process(unit_tests + " --test-suite=gradients --minimal > " +
                                       (fs::path(work) / "gradients.log").string() + " 2>&1",
                                   &elapsed);
    report(1, "gradient fidelity", status == 0 && elapsed < kGradientSuiteSeconds,
           std::string("finite-difference suite ") + (status == 0 ? "passed" : "failed") + " in " + fmt(elapsed, 1) +
               " s (limit " + fmt(kGradientSuiteSeconds, 0) + " s)");
  }

  // 2. Published averages from per-dataset rows.
  {
    auto rows = [](const std::string& method, std::vector<double> asr) {
      const char* names[] = {"dog", "bird", "action", "indoor", "flower"};
      std::vector<EvalReport> out;
      for (std::size_t i = 0; i < asr.size(); ++i) {
        EvalReport r;
        r.method = method;
        r.dataset = names[i];
        r.asr = asr[i];
        out.push_back(r);
      }
      return out;
    };
    const std::string delta = fmt(aggregate(rows("delta", {95.65, 58.83, 93.51, 79.71, 43.65})).asr);
    const std::string reno = fmt(aggregate(rows("renofeation", {9.83, 3.41, 7.16, 11.08, 2.86})).asr);
    report(2, "aggregate arithmetic", delta == "74.27" && reno == "6.87",
           "DELTA average ASR " + delta + " (expect 74.27), Renofeation " + reno + " (expect 6.87)");
  }

  std::ofstream log_file(fs::path(work) / "benchmark.log");
  const Benchmark b = run_benchmark(base, seeds, log_file);
  note("benchmark: " + std::to_string(seeds.size()) + " seeds in " + fmt(b.seconds / 60.0, 1) +
       " min; source test top-1 " + fmt(b.source_top1) + "%; per-run log in " +
       (fs::path(work) / "benchmark.log").string());

  // 3. Attack constraints.
  report(3, "attack constraints", b.violations == 0 && b.objective_increases == 0 && b.audited > 0,
         std::to_string(b.audited) + " adversarial images, " + std::to_string(b.violations) +
             " violate the budget or pixel range, " + std::to_string(b.objective_increases) +
             " end above their initial objective");

  for (Method m : kAllMethods) {
    const std::string name = to_string(m);
    note(name + ": mean clean " + fmt(mean_of(b.main, name, clean_of)) + ", mean ASR " +
         fmt(mean_of(b.main, name, asr_of)));
  }

  // 4. Ordering of the baselines.
  {
    const double lin = mean_of(b.main, "linear", asr_of), ft = mean_of(b.main, "finetune", asr_of),
                 rt = mean_of(b.main, "retrain", asr_of);
    const double ft_clean = mean_of(b.main, "finetune", clean_of), rt_clean = mean_of(b.main, "retrain", clean_of);
    const double chance = 100.0 / static_cast<double>(base.target.classes);
    const double lin_clean = mean_of(b.main, "linear", clean_of);
    const bool pass = lin > ft && ft > rt && rt <= kRetrainAsrMax && lin >= kLinearAsrMin &&
                      ft_clean >= rt_clean + kCleanMargin;
    report(4, "baseline ordering", pass,
           "ASR linear " + fmt(lin) + " > finetune " + fmt(ft) + " > retrain " + fmt(rt) + "; retrain <= " +
               fmt(kRetrainAsrMax, 0) + "; linear >= " + fmt(kLinearAsrMin, 0) + "; clean finetune " +
               fmt(ft_clean) + " >= retrain " + fmt(rt_clean) + " + " + fmt(kCleanMargin, 0));
    note("linear probe clean " + fmt(lin_clean) + "% vs chance " + fmt(chance) + "%");
  }

  // 5. Renofeation against DELTA and re-training.
  {
    const double reno = mean_of(b.main, "renofeation", asr_of), delta = mean_of(b.main, "delta", asr_of);
    const double reno_clean = mean_of(b.main, "renofeation", clean_of);
    const double delta_clean = mean_of(b.main, "delta", clean_of), rt_clean = mean_of(b.main, "retrain", clean_of);
    const bool pass = reno <= delta / kAsrRatio && reno_clean >= delta_clean - kCleanMargin &&
                      reno_clean >= rt_clean + kCleanMargin;
    report(5, "renofeation headline", pass,
           "ASR " + fmt(reno) + " <= delta " + fmt(delta) + " / 3 = " + fmt(delta / kAsrRatio) + "; clean " +
               fmt(reno_clean) + " >= delta " + fmt(delta_clean) + " - 3 and >= retrain " + fmt(rt_clean) + " + 3");
  }

  // 6. Feature-loss ordering of the regularizers.
  {
    const double dr = mean_of(b.main, "delta_r", probe_of), dr_do = mean_of(b.ablation, "delta_r+dropout", probe_of),
                 reno = mean_of(b.main, "renofeation", probe_of);
    const double reno_asr = mean_of(b.main, "renofeation", asr_of), dr_asr = mean_of(b.main, "delta_r", asr_of);
    const bool pass = dr < dr_do && dr_do <= reno && reno_asr <= dr_asr;
    report(6, "feature-loss mechanism", pass,
           "probe feature loss delta_r " + fmt(dr, 4) + " < +dropout " + fmt(dr_do, 4) + " <= renofeation " +
               fmt(reno, 4) + "; ASR renofeation " + fmt(reno_asr) + " <= delta_r " + fmt(dr_asr));
    for (std::uint64_t s : seeds) {
      std::string line = "seed " + std::to_string(s) + ":";
      for (const auto* group : {&b.main, &b.ablation}) {
        for (const auto& c : *group) {
          if (c.seed == s && (c.method == "delta_r" || c.method == "delta_r+dropout" || c.method == "renofeation")) {
            line += " " + c.method + " " + fmt(c.probe_loss, 4);
          }
        }
      }
      note(line);
    }
  }

  // 7. Distance to the source model against robustness (100 - ASR) over
  //    the cells of criteria 4 and 5.
  {
    const std::set<std::string> methods = {"linear", "finetune", "retrain", "delta", "renofeation"};
    std::vector<double> wd, fd, robust, asr, all_wd, all_fd, all_asr;
    for (const auto& c : b.main) {
      all_wd.push_back(c.row.weight_distance);
      all_fd.push_back(c.row.feature_distance);
      all_asr.push_back(c.row.asr);
      if (!methods.count(c.method)) continue;
      wd.push_back(c.row.weight_distance);
      fd.push_back(c.row.feature_distance);
      asr.push_back(c.row.asr);
      robust.push_back(100.0 - c.row.asr);
    }
    const double rw = rank_correlation(wd, robust), rf = rank_correlation(fd, robust);
    const bool pass = wd.size() >= kMinCorrelationCells && rw >= kSpearmanMin && rf >= kSpearmanMin;
    report(7, "distance vs robustness", pass,
           std::to_string(wd.size()) + " cells; spearman(weight distance, 100-ASR) " + fmt(rw, 3) +
               ", spearman(feature distance, 100-ASR) " + fmt(rf, 3) + " (need >= " + fmt(kSpearmanMin, 1) + ")");
    note("against raw ASR: weight " + fmt(rank_correlation(wd, asr), 3) + ", feature " +
         fmt(rank_correlation(fd, asr), 3));
    note("all " + std::to_string(all_asr.size()) + " cells against raw ASR: weight " +
         fmt(rank_correlation(all_wd, all_asr), 3) + ", feature " + fmt(rank_correlation(all_fd, all_asr), 3));
  }

  // 8. Feature-weight sweep.
  {
    std::vector<double> means;
    std::string line;
    for (double lambda : base.sweep_lambda_feat) {
      const std::string key = "lambda=" + text::number(lambda);
      means.push_back(mean_of(b.lambda, key, asr_of));
      line += (line.empty() ? "" : ", ") + text::number(lambda) + ": " + fmt(means.back()) + " (clean " +
              fmt(mean_of(b.lambda, key, clean_of)) + ")";
    }
    int inversions = 0;
    const bool pass = non_decreasing_with_inversions(means, kAllowedInversions, &inversions);
    report(8, "feature-weight trade-off", pass,
           "delta_r mean ASR by lambda_feat " + line + "; " + std::to_string(inversions) + " inversion(s), allowed " +
               std::to_string(kAllowedInversions));
  }

  // 9. Gap at a third of the data.
  {
    const double small_gap = mean_of(b.fraction, "renofeation@0.33", clean_of) - mean_of(b.fraction, "retrain@0.33", clean_of);
    const double full_gap = mean_of(b.main, "renofeation", clean_of) - mean_of(b.main, "retrain", clean_of);
    report(9, "small-data gap", small_gap >= full_gap,
           "clean gap renofeation - retrain at 0.33 " + fmt(small_gap) + " >= at 1.0 " + fmt(full_gap));
  }

  // 10. Determinism of the command-line pipeline.
  {
    std::string detail;
    bool pass = false;
    try {
      pass = determinism_check(fs::path(work) / "determinism", base, &detail);
    } catch (const std::exception& e) {
      detail = e.what();
    }
    report(10, "determinism", pass, detail);
  }

  // 11. Unit and property suites.
  {
    double elapsed = 0.0;
    const int status =
        run_process(unit_tests + " --minimal > " + (fs::path(work) / "unit.log").string() + " 2>&1", &elapsed);
    report(11, "unit and property suites", status == 0,
           std::string("all suites ") + (status == 0 ? "passed" : "failed") + " in " + fmt(elapsed, 1) + " s");
  }

  std::size_t passed = 0;
  for (const auto& v : verdicts) passed += v.pass;
  std::cout << passed << "/" << verdicts.size() << " criteria passed in " << fmt(seconds_since(t_all) / 60.0, 1)
            << " min" << std::endl;
  return passed == verdicts.size() ? 0 : 1;
}
