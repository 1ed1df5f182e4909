// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <glob.h>
#include <omp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <sstream>

#include "experiment.hpp"
#include "renofeat/io.hpp"
#include "renofeat/text.hpp"

namespace renofeat::cli {

namespace fs = std::filesystem;
using Args = std::map<std::string, std::string>;

std::string file_crc32(const fs::path& path) {
  char buf[9];
  if (fs::is_directory(path)) {
    // Directory digest: CRC32 over "name crc" lines of its files in name order.
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::string listing;
    for (const auto& f : files) listing += fs::relative(f, path).generic_string() + " " + file_crc32(f) + "\n";
    std::snprintf(buf, sizeof buf, "%08x",
                  crc32({reinterpret_cast<const std::uint8_t*>(listing.data()), listing.size()}));
    return buf;
  }
  const auto bytes = read_file(path);
  std::snprintf(buf, sizeof buf, "%08x", crc32(bytes));
  return buf;
}

std::string Manifest::to_json() const {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["phase"] = phase;
  j["seed"] = seed;
  j["args"] = args;
  nlohmann::ordered_json settings = nlohmann::ordered_json::object();
  const Config parsed = Config::parse(config, "manifest");
  for (const auto& key : parsed.keys()) settings[key] = parsed.get_string(key);
  j["config"] = settings;
  auto artifacts = [](const std::vector<Artifact>& list) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& a : list) arr.push_back({{"path", a.path}, {"crc32", a.crc32}});
    return arr;
  };
  j["inputs"] = artifacts(inputs);
  j["outputs"] = artifacts(outputs);
  j["wall_seconds"] = wall_seconds;
  return j.dump(2) + "\n";
}

Manifest Manifest::from_json(const std::string& body) {
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(body);
    m.run_id = j.at("run_id").get<std::string>();
    m.phase = j.at("phase").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.args = j.at("args").get<Args>();
    for (const auto& [key, value] : j.at("config").items()) m.config += key + " = " + value.get<std::string>() + "\n";
    for (const auto& a : j.at("inputs")) m.inputs.push_back({a.at("path"), a.at("crc32")});
    for (const auto& a : j.at("outputs")) m.outputs.push_back({a.at("path"), a.at("crc32")});
    m.wall_seconds = j.value("wall_seconds", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

Manifest Manifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::ostringstream body;
  body << in.rdbuf();
  return from_json(body.str());
}

namespace {

constexpr const char* kPathArgs[] = {"pretrained", "model", "adv", "corpus", "train_corpus"};

bool is_path_arg(const std::string& key) {
  return key.rfind("input", 0) == 0 ||
         std::find(std::begin(kPathArgs), std::end(kPathArgs), key) != std::end(kPathArgs);
}

// A run directory `<root>/<id>/` whose id is the CRC32 of everything that
// determines its outputs.
class RunDir {
 public:
  RunDir(const std::string& phase, const Experiment& exp, const Args& args, const fs::path& root)
      : start_(std::chrono::steady_clock::now()) {
    manifest_.phase = phase;
    manifest_.seed = exp.seed;
    manifest_.args = args;
    manifest_.config = exp.to_config().serialize();
    for (const auto& [key, value] : args) {
      if (is_path_arg(key)) manifest_.inputs.push_back({value, file_crc32(value)});
    }
    std::string identity = phase + "\n" + manifest_.config;
    for (const auto& [key, value] : args) identity += key + "=" + value + "\n";
    for (const auto& in : manifest_.inputs) identity += in.crc32 + "\n";
    char id[9];
    std::snprintf(id, sizeof id, "%08x",
                  crc32({reinterpret_cast<const std::uint8_t*>(identity.data()), identity.size()}));
    manifest_.run_id = phase + "-" + id;
    dir_ = root / manifest_.run_id;
    if (fs::exists(dir_)) {
      throw std::runtime_error("run directory " + dir_.string() + " already exists; choose another --out");
    }
    for (const char* sub : {"checkpoints", "caches", "tables"}) fs::create_directories(dir_ / sub);
  }

  fs::path path(const std::string& relative) const { return dir_ / relative; }
  const fs::path& dir() const { return dir_; }

  const Manifest& finish() {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir_)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      manifest_.outputs.push_back({fs::relative(f, dir_).generic_string(), file_crc32(f)});
    }
    manifest_.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ofstream(dir_ / "manifest.json") << manifest_.to_json();
    return manifest_;
  }

 private:
  Manifest manifest_;
  fs::path dir_;
  std::chrono::steady_clock::time_point start_;
};

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << body;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream body;
  body << in.rdbuf();
  return body.str();
}

std::string arg_or(const Args& args, const std::string& key, const std::string& fallback = "") {
  const auto it = args.find(key);
  return it == args.end() ? fallback : it->second;
}

ParamSet load_pretrained(const Experiment& exp, const std::string& path) {
  return load_checkpoint(path, exp.architecture(exp.source.classes));
}

TargetData load_target(const Experiment& exp, const Args& args, double fraction = 1.0) {
  const std::string test = arg_or(args, "corpus"), train_dir = arg_or(args, "train_corpus");
  if (test.empty() != train_dir.empty()) {
    throw std::invalid_argument("--corpus and --train-corpus must be given together");
  }
  if (test.empty()) return target_data(exp, fraction);
  TargetData data{ingest_raw(train_dir, Split::kTrain), ingest_raw(test, Split::kTest)};
  if (fraction < 1.0) data.train = subsample_per_class(data.train, fraction, exp.seed);
  return data;
}

std::string cell_label(const std::string& axis, double value) { return axis + "=" + text::number(value); }

// ---- commands --------------------------------------------------------------

void cmd_pretrain(const Experiment& exp, const Args&, RunDir& run, std::ostream& out) {
  const PretrainOutcome r = pretrain(exp);
  save_checkpoint(r.params, run.path("checkpoints/pretrained.rnfc"));
  write_text(run.path("tables/train_log.csv"), r.log.to_csv());
  write_text(run.path("tables/source_eval.csv"),
             "metric,value\nsource_test_top1," + text::number(r.source_test_top1) + "\n");
  out << "pretrain: source test top-1 " << text::number(r.source_test_top1) << "%\n";
}

void cmd_transfer(const Experiment& exp, const Args& args, RunDir& run, std::ostream& out) {
  const Method method = parse_method(arg_or(args, "method"));
  const std::string pre_path = arg_or(args, "pretrained");
  if (needs_pretrained(method) && pre_path.empty()) {
    throw std::invalid_argument(std::string(to_string(method)) + " needs --pretrained");
  }
  std::optional<ParamSet> pretrained;
  if (!pre_path.empty()) pretrained = load_pretrained(exp, pre_path);
  const double fraction = text::parse_double(arg_or(args, "fraction", "1")).value_or(-1.0);
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("--fraction must lie in (0, 1]");
  const TargetData data = load_target(exp, args, fraction);
  const TrainResult r = train(exp.transfer_config(method), exp.architecture(data.train.class_count), data.train,
                              pretrained ? &*pretrained : nullptr);
  save_checkpoint(r.params, run.path(std::string("checkpoints/") + to_string(method) + ".rnfc"));
  write_text(run.path("tables/train_log.csv"), r.log.to_csv());
  write_text(run.path("tables/summary.csv"),
             "metric,value\nmain_records," + std::to_string(r.log.main_iterations) + "\nswa_snapshots," +
                 std::to_string(r.log.swa_snapshots) + "\nfinal_probe_feature_loss," +
                 text::number(r.final_probe_feature_loss) + "\n");
  out << "transfer: " << to_string(method) << " on " << data.train.size() << " images, final probe feature loss "
      << text::number(r.final_probe_feature_loss) << "\n";
}

void cmd_attack(const Experiment& exp, const Args& args, RunDir& run, std::ostream& out) {
  const ParamSet pretrained = load_pretrained(exp, arg_or(args, "pretrained"));
  const std::string corpus_dir = arg_or(args, "corpus");
  const Corpus test = corpus_dir.empty() ? target_data(exp).test : ingest_raw(corpus_dir, Split::kTest);
  const AdversarialBatch adv = attack_target(exp, pretrained, test);
  if (const std::size_t bad = audit_constraints(adv, test, exp.attack.budget); bad != 0) {
    throw std::logic_error("internal error: " + std::to_string(bad) + " adversarial images break the constraints");
  }
  write_attack_cache(adv, exp.attack_config(), run.path("caches/adv"));
  out << "attack: " << adv.size() << " images cached\n";
}

void cmd_evaluate(const Experiment& exp, const Args& args, RunDir& run, std::ostream& out) {
  const ParamSet pretrained = load_pretrained(exp, arg_or(args, "pretrained"));
  const fs::path model_path = arg_or(args, "model");
  const ParamSet model = load_checkpoint(model_path);
  const TargetData data = load_target(exp, args);
  check_layout(exp.architecture(data.test.class_count), model);
  const AdversarialBatch adv = read_attack_cache(arg_or(args, "adv"));
  const std::string method = arg_or(args, "method", model_path.stem().string());
  const EvalReport row = evaluate_model(exp, method, arg_or(args, "cell", "-"), model, pretrained, data, adv);
  write_text(run.path("tables/report.csv"), format_report_table({row}));
  out << format_report_table({row});
}

void cmd_sweep(const Experiment& exp, const Args& args, RunDir& run, std::ostream& out) {
  const std::string pre_path = arg_or(args, "pretrained");
  if (pre_path.empty()) throw std::invalid_argument("sweep needs --pretrained");
  const ParamSet pretrained = load_pretrained(exp, pre_path);
  const TargetData full = load_target(exp, args);
  const ModelSpec arch = exp.architecture(full.train.class_count);

  if (exp.sweep_axis == "grid") {
    const Method method = parse_method(exp.sweep_method);
    const Grid grid{{exp.sweep_lr.begin(), exp.sweep_lr.end()},
                    {exp.sweep_momentum.begin(), exp.sweep_momentum.end()},
                    {exp.sweep_weight_decay.begin(), exp.sweep_weight_decay.end()},
                    {}};
    const Corpus val = generate_split(exp.target_task(), Split::kVal, exp.target.test_per_class);
    const GridResult r = grid_search(exp.transfer_config(method), grid, arch, full.train, val, &pretrained);
    std::string table = "cell,lr,momentum,weight_decay,val_clean_top1,selected\n";
    for (std::size_t i = 0; i < r.table.size(); ++i) {
      const auto& c = r.table[i];
      table += std::to_string(i) + "," + text::number(c.config.lr) + "," + text::number(c.config.momentum) + "," +
               text::number(c.config.weight_decay) + "," + text::number(c.val_clean_top1) + "," +
               (c.config == r.best_config ? "1" : "0") + "\n";
    }
    save_checkpoint(r.best_params, run.path("checkpoints/best.rnfc"));
    write_text(run.path("tables/grid.csv"), table);
    out << table;
    return;
  }

  const std::string adv_dir = arg_or(args, "adv");
  const AdversarialBatch adv = adv_dir.empty() ? attack_target(exp, pretrained, full.test) : read_attack_cache(adv_dir);
  std::vector<EvalReport> rows;
  if (exp.sweep_axis == "lambda_feat") {
    const Method method = parse_method(exp.sweep_method);
    for (double lambda : exp.sweep_lambda_feat) {
      TransferConfig c = exp.transfer_config(method);
      c.lambda_feat = static_cast<float>(lambda);
      c.validate();
      const TrainResult r = train(c, arch, full.train, &pretrained);
      rows.push_back(evaluate_model(exp, to_string(method), cell_label("lambda_feat", lambda), r.params,
                                    pretrained, full, adv));
      out << format_report_row(rows.back()) << "\n";
    }
  } else {
    for (double fraction : exp.sweep_fractions) {
      const TargetData data = load_target(exp, args, fraction);
      for (const auto& name : exp.sweep_fraction_methods) {
        const Method method = parse_method(name);
        const TrainResult r = train(exp.transfer_config(method), arch, data.train, &pretrained);
        // Distances are measured over the full training split for every fraction.
        rows.push_back(evaluate_model(exp, to_string(method), cell_label("fraction", fraction), r.params,
                                      pretrained, TargetData{full.train, data.test}, adv));
        out << format_report_row(rows.back()) << "\n";
      }
    }
  }
  write_text(run.path("tables/sweep.csv"), format_report_table(rows));
}

std::vector<std::string> expand(const std::vector<std::string>& patterns) {
  std::vector<std::string> paths;
  for (const auto& p : patterns) {
    if (p.find_first_of("*?[") == std::string::npos) {
      paths.push_back(p);
      continue;
    }
    glob_t g{};
    if (::glob(p.c_str(), 0, nullptr, &g) == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) paths.emplace_back(g.gl_pathv[i]);
    }
    globfree(&g);
  }
  return paths;
}

std::string spearman_text(const std::vector<double>& xs, const std::vector<double>& ys) {
  try {
    return text::number(rank_correlation(xs, ys));
  } catch (const std::exception&) {
    return "undefined";
  }
}

void cmd_report(const Experiment&, const Args& args, RunDir& run, std::ostream& out) {
  std::vector<EvalReport> rows;
  for (std::size_t i = 0;; ++i) {
    const std::string path = arg_or(args, "input" + std::to_string(i));
    if (path.empty()) break;
    try {
      for (auto& row : parse_report_table(read_text(path))) rows.push_back(std::move(row));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(path + ": " + e.what());
    }
  }
  if (rows.empty()) throw std::invalid_argument("report needs at least one row");

  // Per (method, cell) averages in order of first appearance.
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::vector<EvalReport>> groups;
  for (const auto& row : rows) {
    const auto key = std::make_pair(row.method, row.cell);
    if (groups.count(key) == 0) order.push_back(key);
    groups[key].push_back(row);
  }
  std::vector<EvalReport> averages;
  for (const auto& key : order) averages.push_back(aggregate(groups[key]));
  write_text(run.path("tables/aggregate.csv"), format_report_table(averages));

  std::vector<double> wd, fd, asr;
  std::string scatter;
  for (const auto& r : rows) {
    wd.push_back(r.weight_distance);
    fd.push_back(r.feature_distance);
    asr.push_back(r.asr);
    scatter += r.method + "," + r.dataset + "," + r.cell + "," + text::number(r.weight_distance) + "," +
               text::number(r.feature_distance) + "," + text::number(r.asr) + "\n";
  }
  write_text(run.path("tables/scatter.csv"),
             "# spearman(weight_distance, asr) = " + spearman_text(wd, asr) + "\n" +
                 "# spearman(feature_distance, asr) = " + spearman_text(fd, asr) + "\n" +
                 "method,dataset,cell,weight_distance,feature_distance,asr\n" + scatter);

  std::map<double, std::vector<EvalReport>> by_lambda;
  for (const auto& r : rows) {
    if (r.cell.rfind("lambda_feat=", 0) == 0) by_lambda[*text::parse_double(r.cell.substr(12))].push_back(r);
  }
  if (!by_lambda.empty()) {
    std::string tradeoff = "lambda_feat,clean_top1,asr,rows\n";
    for (const auto& [lambda, group] : by_lambda) {
      double clean = 0.0, a = 0.0;
      for (const auto& r : group) {
        clean += r.clean_top1;
        a += r.asr;
      }
      const auto n = static_cast<double>(group.size());
      tradeoff += text::number(lambda) + "," + text::number(clean / n) + "," + text::number(a / n) + "," +
                  std::to_string(group.size()) + "\n";
    }
    write_text(run.path("tables/tradeoff.csv"), tradeoff);
  }
  out << format_report_table(averages);
}

using Command = std::function<void(const Experiment&, const Args&, RunDir&, std::ostream&)>;

const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> table = {
      {"pretrain", cmd_pretrain}, {"transfer", cmd_transfer}, {"attack", cmd_attack},
      {"evaluate", cmd_evaluate}, {"sweep", cmd_sweep},       {"report", cmd_report},
  };
  return table;
}

Manifest execute(const std::string& phase, const Experiment& exp, const Args& args, const fs::path& root,
                 std::ostream& out) {
  RunDir run(phase, exp, args, root);
  commands().at(phase)(exp, args, run, out);
  Manifest m = run.finish();
  out << phase << ": wrote " << run.dir().string() << "\n";
  return m;
}

int replay(const fs::path& manifest_path, const fs::path& root, std::ostream& out, std::ostream& err) {
  const Manifest m = Manifest::load(manifest_path);
  if (commands().count(m.phase) == 0) throw std::runtime_error("manifest names unknown phase '" + m.phase + "'");
  for (const auto& in : m.inputs) {
    const std::string now = file_crc32(in.path);
    if (now != in.crc32) {
      throw std::runtime_error("input " + in.path + " changed since the run (crc32 " + now + ", recorded " +
                               in.crc32 + ")");
    }
  }
  const Experiment exp = Experiment::from_config(Config::parse(m.config, manifest_path.string()));
  const Manifest again = execute(m.phase, exp, m.args, root, out);
  std::size_t mismatches = 0;
  std::map<std::string, std::string> recorded;
  for (const auto& o : m.outputs) recorded[o.path] = o.crc32;
  std::map<std::string, std::string> produced;
  for (const auto& o : again.outputs) produced[o.path] = o.crc32;
  for (const auto& [path, crc] : recorded) {
    const auto it = produced.find(path);
    if (it == produced.end() || it->second != crc) {
      err << "replay mismatch: " << path << "\n";
      ++mismatches;
    }
  }
  if (produced.size() != recorded.size()) {
    err << "replay mismatch: " << produced.size() << " outputs, recorded " << recorded.size() << "\n";
    ++mismatches;
  }
  if (mismatches != 0) return 1;
  out << "replay: " << recorded.size() << " outputs bit-identical to " << m.run_id << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transfer-learning robustness testbed", "renofeat"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_root = "runs";
  int threads = 0;
  app.add_option("--config", config_path, "Experiment config file (section.key = value)");
  app.add_option("--seed", seed, "Experiment seed (overrides run.seed)");
  app.add_option("--out", out_root, "Root directory for run directories")->capture_default_str();
  app.add_option("--threads", threads, "OpenMP threads (0 keeps the runtime default)")->check(CLI::NonNegativeNumber);

  Args args;
  std::string method, pretrained, model, adv, corpus, train_corpus, label, cell, manifest;
  double fraction = 1.0;
  std::vector<std::string> inputs;

  app.add_subcommand("pretrain", "Train the source model from scratch");

  auto* transfer = app.add_subcommand("transfer", "Transfer the source model to the target task");
  transfer->add_option("--method", method, "linear, finetune, l2sp, delta, retrain, delta_r or renofeation")
      ->required();
  transfer->add_option("--pretrained", pretrained, "Source checkpoint (ignored by retrain)");
  transfer->add_option("--fraction", fraction, "Fraction of training images kept per class");
  transfer->add_option("--corpus", corpus, "Raw test corpus directory");
  transfer->add_option("--train-corpus", train_corpus, "Raw training corpus directory");

  auto* attack = app.add_subcommand("attack", "Craft feature-space adversarial examples from the source model");
  attack->add_option("--pretrained", pretrained, "Source checkpoint")->required();
  attack->add_option("--corpus", corpus, "Raw corpus directory (default: synthetic target test split)");

  auto* evaluate = app.add_subcommand("evaluate", "Clean accuracy, attack success rate and distances");
  evaluate->add_option("--model", model, "Transferred checkpoint")->required();
  evaluate->add_option("--adv", adv, "Adversarial cache directory")->required();
  evaluate->add_option("--pretrained", pretrained, "Source checkpoint")->required();
  evaluate->add_option("--corpus", corpus, "Raw test corpus directory");
  evaluate->add_option("--train-corpus", train_corpus, "Raw training corpus directory");
  evaluate->add_option("--method", label, "Method label for the report row (default: checkpoint name)");
  evaluate->add_option("--cell", cell, "Cell label for the report row");

  auto* sweep = app.add_subcommand("sweep", "Grid, feature-weight or data-fraction sweep");
  sweep->add_option("--pretrained", pretrained, "Source checkpoint")->required();
  sweep->add_option("--adv", adv, "Adversarial cache (default: attack in-run)");

  auto* report = app.add_subcommand("report", "Aggregate report tables and emit plot data");
  report->add_option("inputs", inputs, "Report tables or glob patterns")->required();

  auto* replay_cmd = app.add_subcommand("replay", "Re-run a manifest and compare outputs bit for bit");
  replay_cmd->add_option("manifest", manifest, "manifest.json of a previous run")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (threads > 0) omp_set_num_threads(threads);
    if (*replay_cmd) return replay(manifest, out_root, out, err);

    Config config = config_path.empty() ? Config() : Config::load(config_path);
    if (seed) config.set("run.seed", std::to_string(*seed));
    const Experiment exp = Experiment::from_config(config);

    auto abs = [](const std::string& p) { return fs::absolute(p).lexically_normal().string(); };
    const std::string phase = app.get_subcommands().front()->get_name();
    if (!method.empty()) args["method"] = method;
    if (!pretrained.empty()) args["pretrained"] = abs(pretrained);
    if (!model.empty()) args["model"] = abs(model);
    if (!adv.empty()) args["adv"] = abs(adv);
    if (!corpus.empty()) args["corpus"] = abs(corpus);
    if (!train_corpus.empty()) args["train_corpus"] = abs(train_corpus);
    if (!label.empty()) args["method"] = label;
    if (!cell.empty()) args["cell"] = cell;
    if (phase == "transfer" && fraction != 1.0) args["fraction"] = text::number(fraction);
    const auto files = expand(inputs);
    if (phase == "report" && files.empty()) throw std::invalid_argument("report: no input matched");
    for (std::size_t i = 0; i < files.size(); ++i) args["input" + std::to_string(i)] = abs(files[i]);

    execute(phase, exp, args, out_root, out);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace renofeat::cli
