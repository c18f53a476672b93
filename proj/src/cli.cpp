#include "ctxvit/cli.hpp"

#include <malloc.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "ctxvit/eval.hpp"
#include "ctxvit/pca.hpp"
#include "ctxvit/train.hpp"
#include "ctxvit/verify.hpp"

namespace ctxvit {

using Json = nlohmann::ordered_json;

void configure_allocator() {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunConfig config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
  for (const std::string& o : overrides) apply_override(config, o);
  config.validate();
  return config;
}

std::filesystem::path create_run_directory(const RunConfig& config, const std::string& command) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const std::filesystem::path root(config.output_dir);
  std::filesystem::create_directories(root);
  const std::string base = command + "-" + config.hash() + "-" + stamp;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::filesystem::path dir = root / (attempt == 0 ? base : base + "-" + std::to_string(attempt));
    // create_directory reports false when the directory already exists.
    if (std::filesystem::create_directory(dir)) return dir;
  }
  throw std::runtime_error("could not create a fresh run directory under " + root.string());
}

DatasetSplit obtain_dataset(const RunConfig& config) {
  if (!config.dataset.empty()) {
    if (!std::filesystem::exists(config.dataset)) {
      throw std::runtime_error("dataset file not found: " + config.dataset);
    }
    return load_dataset(config.dataset);
  }
  return generate_dataset(config.data, config.data_seed);
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const RunConfig cfg = parse_run_config(ckpt.config_text, "checkpoint config");
  std::vector<GroupId> oracle_groups;
  for (std::size_t g = 0; g < cfg.data.train_groups; ++g) oracle_groups.push_back(g);
  Model model = init_model(cfg.vit_config(), cfg.context_kind(), oracle_groups, cfg.seed);
  restore_model(ckpt, model);
  return model;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::string real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Json report_json(const MetricsReport& r) {
  Json j;
  j["accuracy"] = r.accuracy;
  j["correct"] = r.correct;
  j["total"] = r.total;
  j["worst_group_accuracy"] = r.worst_group_accuracy;
  j["worst_group"] = r.worst_group;
  Json groups = Json::object();
  for (const GroupAccuracy& g : r.per_group) groups[std::to_string(g.group)] = g.accuracy;
  j["per_group_accuracy"] = groups;
  return j;
}

Json summary_json(const EvalSummary& s) {
  Json j;
  if (s.val.total > 0) j["val"] = report_json(s.val);
  j["id_test"] = report_json(s.id_test);
  j["ood_test"] = report_json(s.ood_test);
  j["ood_gap"] = s.ood_gap;
  return j;
}

std::vector<GroupId> oracle_groups(const DatasetSplit& data) { return data.train_group_ids; }

Checkpoint load_checkpoint_for(const RunConfig& config, const char* command) {
  if (config.checkpoint.empty()) {
    throw ConfigError(std::string(command) + " needs a checkpoint: pass checkpoint=<path>");
  }
  if (!std::filesystem::exists(config.checkpoint)) {
    throw std::runtime_error("checkpoint file not found: " + config.checkpoint);
  }
  return read_checkpoint(config.checkpoint);
}

void log(const std::string& msg) { std::cerr << msg << std::endl; }

std::uint64_t eval_seed(const RunConfig& config) { return Rng(config.seed).split("eval").next_u64(); }

// ---------------------------------------------------------------------------

void cmd_generate_data(const RunConfig& config, const std::filesystem::path& dir) {
  const DatasetSplit data = generate_dataset(config.data, config.data_seed);
  save_dataset(data, dir / "dataset.bin");
  write_text(dir / "manifest.json", dataset_manifest(data));
  log("wrote " + (dir / "dataset.bin").string());
}

void cmd_train(const RunConfig& config, const std::filesystem::path& dir) {
  const DatasetSplit data = obtain_dataset(config);
  const auto start = std::chrono::steady_clock::now();
  Model model = init_model(config.vit_config(), config.context_kind(), oracle_groups(data), config.seed);
  TrainResult result = fine_tune(std::move(model), data, config.train_config());
  const EvalSummary summary = evaluate_model(result.model, data, config.train.eval_batch_size, eval_seed(config));
  append_summary(result.log, summary, static_cast<long>(result.best_epoch), config.seed, config.kind);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  write_checkpoint(checkpoint_from_model(result.model, config.hash(), config.dump()), dir / "checkpoint.bin");
  write_text(dir / "metrics.csv", result.log.to_csv());
  Json j;
  j["command"] = "train";
  j["config_hash"] = config.hash();
  j["kind"] = config.kind;
  j["seed"] = config.seed;
  j["best_epoch"] = result.best_epoch;
  j["best_val_accuracy"] = result.best_val_accuracy;
  j["metrics"] = summary_json(summary);
  j["wall_clock_seconds"] = seconds;
  write_text(dir / "summary.json", j.dump(2) + "\n");
  log("ood accuracy " + real(summary.ood_test.accuracy) + ", id accuracy " + real(summary.id_test.accuracy));
}

void cmd_probe(const RunConfig& config, const std::filesystem::path& dir) {
  const Checkpoint ckpt = load_checkpoint_for(config, "probe");
  const Model frozen = model_from_checkpoint(ckpt);
  const DatasetSplit data = obtain_dataset(config);
  ProbeResult result = linear_probe(frozen, data, config.train_config());
  const EvalSummary summary = evaluate_model(result.model, data, config.train.eval_batch_size, eval_seed(config));
  append_summary(result.log, summary, static_cast<long>(config.train.probe_epochs), config.seed,
                 frozen.kind.name());
  write_checkpoint(checkpoint_from_model(result.model, config.hash(), ckpt.config_text), dir / "checkpoint.bin");
  write_text(dir / "metrics.csv", result.log.to_csv());
  Json j;
  j["command"] = "probe";
  j["config_hash"] = config.hash();
  j["source_checkpoint"] = config.checkpoint;
  j["source_config_hash"] = ckpt.config_hash;
  j["kind"] = frozen.kind.name();
  j["metrics"] = summary_json(summary);
  write_text(dir / "summary.json", j.dump(2) + "\n");
  log("probe ood accuracy " + real(summary.ood_test.accuracy));
}

void cmd_ablate(const RunConfig& config, const std::filesystem::path& dir) {
  const DatasetSplit data = obtain_dataset(config);
  AblationConfig ac;
  ac.kinds = config.ablation_kinds;
  ac.seeds = config.ablation_seeds;
  ac.vit = config.vit_config();
  ac.train = config.train_config();
  ac.progress = log;
  const AblationResult result = run_ablation(data, ac);
  write_text(dir / "ablation.csv", result.to_csv());
  MetricsLog all;
  std::ostringstream runs;
  runs << "kind,seed,ok,ood_accuracy,id_accuracy,worst_group_ood_accuracy,ood_gap,seconds,error\n";
  for (const AblationRun& r : result.runs) {
    all.rows.insert(all.rows.end(), r.log.rows.begin(), r.log.rows.end());
    std::string err = r.error;
    for (char& c : err) {
      if (c == ',' || c == '\n') c = ';';
    }
    runs << r.kind << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ',' << real(r.summary.ood_test.accuracy) << ','
         << real(r.summary.id_test.accuracy) << ',' << real(r.summary.ood_test.worst_group_accuracy) << ','
         << real(r.summary.ood_gap) << ',' << real(r.seconds) << ',' << err << '\n';
  }
  write_text(dir / "runs.csv", runs.str());
  write_text(dir / "metrics.csv", all.to_csv());
  Json j;
  j["command"] = "ablate";
  j["config_hash"] = config.hash();
  j["seeds"] = config.ablation_seeds;
  Json rows = Json::array();
  for (const AblationRow& r : result.rows) {
    rows.push_back({{"kind", r.kind},
                    {"runs_ok", r.runs_ok},
                    {"runs_failed", r.runs_failed},
                    {"ood_median", r.ood_median},
                    {"ood_mean", r.ood_mean},
                    {"ood_std", r.ood_std},
                    {"id_median", r.id_median},
                    {"worst_group_ood_median", r.worst_group_ood_median},
                    {"seconds", r.seconds}});
  }
  j["rows"] = rows;
  write_text(dir / "summary.json", j.dump(2) + "\n");
  std::cout << result.to_csv();
}

void cmd_sweep(const RunConfig& config, const std::filesystem::path& dir) {
  const Checkpoint ckpt = load_checkpoint_for(config, "sweep");
  const Model model = model_from_checkpoint(ckpt);
  const DatasetSplit data = obtain_dataset(config);
  const std::vector<SweepPoint> points = batch_size_sweep(model, data.ood_test, config.sweep_sizes, eval_seed(config));
  std::ostringstream csv;
  csv << "batch_size,accuracy,worst_group_accuracy\n";
  Json rows = Json::array();
  for (const SweepPoint& p : points) {
    csv << p.batch_size << ',' << real(p.report.accuracy) << ',' << real(p.report.worst_group_accuracy) << '\n';
    rows.push_back({{"batch_size", p.batch_size}, {"report", report_json(p.report)}});
  }
  write_text(dir / "sweep.csv", csv.str());
  Json j;
  j["command"] = "sweep";
  j["config_hash"] = config.hash();
  j["kind"] = model.kind.name();
  j["split"] = "ood_test";
  j["points"] = rows;
  write_text(dir / "summary.json", j.dump(2) + "\n");
  std::cout << csv.str();
}

void cmd_export_context(const RunConfig& config, const std::filesystem::path& dir) {
  const Checkpoint ckpt = load_checkpoint_for(config, "export-context");
  const Model model = model_from_checkpoint(ckpt);
  const DatasetSplit data = obtain_dataset(config);
  std::vector<Sample> pool(data.id_test.begin(), data.id_test.end());
  pool.insert(pool.end(), data.ood_test.begin(), data.ood_test.end());
  const ContextTokenSet tokens = collect_context_tokens(model, pool, config.token_batch_size,
                                                        config.token_batches_per_group, config.token_layer,
                                                        eval_seed(config));
  const PcaResult pca = pca_project(tokens.tokens, config.pca_components);
  const SeparationScore sep = separation_score(tokens.tokens, tokens.groups);

  std::ostringstream tcsv, pcsv;
  tcsv << "group";
  for (std::size_t j = 0; j < model.config.dim; ++j) tcsv << ",t" << j;
  tcsv << '\n';
  pcsv << "group";
  for (std::size_t j = 0; j < config.pca_components; ++j) pcsv << ",pc" << (j + 1);
  pcsv << '\n';
  for (std::size_t i = 0; i < tokens.tokens.size(); ++i) {
    tcsv << tokens.groups[i];
    for (double v : tokens.tokens[i]) tcsv << ',' << real(v);
    tcsv << '\n';
    pcsv << tokens.groups[i];
    for (double v : pca.projections[i]) pcsv << ',' << real(v);
    pcsv << '\n';
  }
  write_text(dir / "context_tokens.csv", tcsv.str());
  write_text(dir / "pca.csv", pcsv.str());
  Json j;
  j["command"] = "export-context";
  j["config_hash"] = config.hash();
  j["kind"] = model.kind.name();
  j["layer"] = config.token_layer;
  j["tokens"] = tokens.tokens.size();
  j["explained_variance_ratio"] = pca.explained_variance_ratio;
  j["zero_variance_components"] = pca.zero_variance_components;
  j["separation"] = {{"ratio", std::isfinite(sep.ratio) ? Json(sep.ratio) : Json(nullptr)},
                     {"between", sep.between},
                     {"within", sep.within},
                     {"infinite", sep.infinite},
                     {"degenerate", sep.degenerate}};
  write_text(dir / "summary.json", j.dump(2) + "\n");
  log("separation ratio " + real(sep.ratio));
}

bool cmd_grad_check(const RunConfig&, const std::filesystem::path& dir) {
  GradSuiteOptions opts;
  opts.on_result = [](const GradCheckOutcome& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-4s %-40s max_rel_error %.3e (%zu coords, %zu at kinks, %.2fs)",
                  r.passed ? "ok" : "FAIL", r.name.c_str(), r.max_rel_error, r.coords, r.coords_at_kinks, r.seconds);
    std::cout << buf << std::endl;
  };
  const std::vector<GradCheckOutcome> results = run_gradient_suite(opts);
  std::ostringstream csv;
  csv << "check,passed,max_rel_error,coords,coords_at_kinks,seconds,detail\n";
  bool all = true;
  for (const GradCheckOutcome& r : results) {
    all = all && r.passed;
    std::string detail = r.detail;
    for (char& c : detail) {
      if (c == ',' || c == '\n') c = ';';
    }
    csv << r.name << ',' << (r.passed ? 1 : 0) << ',' << real(r.max_rel_error) << ',' << r.coords << ',' << r.coords_at_kinks << ','
        << real(r.seconds) << ',' << detail
        << '\n';
  }
  write_text(dir / "gradcheck.csv", csv.str());
  return all;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Contextual vision transformer harness"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"generate-data", "Generate the synthetic grouped-shift dataset"},
      {"train", "Fine-tune a model and save a checkpoint"},
      {"probe", "Train a linear probe on a frozen checkpoint"},
      {"ablate", "Train every kind in ablation_kinds over ablation_seeds"},
      {"sweep", "Re-evaluate OOD accuracy of a checkpoint at several test batch sizes"},
      {"export-context", "Export context tokens, PCA projections and the separation score"},
      {"grad-check", "Run the finite-difference gradient suite"},
  };
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", config_path, "Flat key = value config file");
    sub->add_option("overrides", overrides, "key=value overrides applied after the config file");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string command = app.get_subcommands().front()->get_name();

  RunConfig config;
  try {
    config = resolve_config(config_path, overrides);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  }

  try {
    const std::filesystem::path dir = create_run_directory(config, command);
    write_text(dir / "config.txt", config.dump());
    write_text(dir / "config_hash.txt", config.hash() + "\n");
    log("run directory " + dir.string());
    bool ok = true;
    if (command == "generate-data") cmd_generate_data(config, dir);
    else if (command == "train") cmd_train(config, dir);
    else if (command == "probe") cmd_probe(config, dir);
    else if (command == "ablate") cmd_ablate(config, dir);
    else if (command == "sweep") cmd_sweep(config, dir);
    else if (command == "export-context") cmd_export_context(config, dir);
    else if (command == "grad-check") ok = cmd_grad_check(config, dir);
    std::cout << dir.string() << std::endl;
    return ok ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}

}  // namespace ctxvit
