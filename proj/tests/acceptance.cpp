// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Criteria may be selected by number on the command line.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ctxvit/checkpoint.hpp"
#include "ctxvit/cli.hpp"
#include "ctxvit/config.hpp"
#include "ctxvit/eval.hpp"
#include "ctxvit/pca.hpp"
#include "ctxvit/verify.hpp"

using namespace ctxvit;

namespace {

// Pinned tolerances.
constexpr double kGradStep = 1e-4;
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSuiteSeconds = 120.0;
constexpr double kPermutationTolerance = 1e-12;
constexpr double kOodMarginPoints = 0.05;
constexpr double kAblationSeconds = 30.0 * 60.0;
constexpr double kMinSeparation = 1.0;
constexpr double kMinExplained = 0.5;
constexpr double kOrthonormalTolerance = 1e-9;
constexpr double kScheduleTolerance = 1e-9;

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<std::vector<double>> all_grads(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const NamedParam& p : m.parameters()) out.push_back(p.tensor.grad());
  return out;
}

void zero_grads(Model& m) {
  for (NamedParam& p : m.parameters()) p.tensor.zero_grad();
}

std::vector<std::vector<double>> loss_grads(Model& m, const GroupedBatch& batch, const ContextForwardOptions& opts) {
  zero_grads(m);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(cross_entropy(m.forward(batch, opts).logits, batch.labels));
  }
  return all_grads(m);
}

std::vector<std::string> amortized_kinds() {
  std::vector<std::string> out;
  for (const std::string& name : gradient_suite_kinds()) {
    if (ContextKind::parse(name).amortized()) out.push_back(name);
  }
  return out;
}

// 1 -------------------------------------------------------------------------
Verdict gradient_suite() {
  GradSuiteOptions opts;
  opts.step = kGradStep;
  opts.tolerance = kGradTolerance;
  const auto start = std::chrono::steady_clock::now();
  const std::vector<GradCheckOutcome> results = run_gradient_suite(opts);
  const double elapsed = seconds_since(start);
  double worst = 0.0;
  std::string worst_name, failed;
  std::size_t models = 0;
  for (const GradCheckOutcome& r : results) {
    if (r.name.rfind("model/", 0) == 0) ++models;
    if (!r.passed) failed += " " + r.name;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  const bool pass = failed.empty() && worst < kGradTolerance && elapsed < kGradSuiteSeconds &&
                    models == gradient_suite_kinds().size();
  std::string detail = std::to_string(results.size()) + " checks, worst " + fmt("%.3g", worst) + " (" + worst_name +
                       "), " + fmt("%.1f", elapsed) + " s";
  if (!failed.empty()) detail += ", failed:" + failed;
  return {pass, detail};
}

// 2 -------------------------------------------------------------------------
Verdict detach_semantics() {
  const ViTConfig cfg = toy_vit_config();
  bool exact = true, differ = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const GroupedBatch batch = toy_batch(cfg, 100 + seed);
    ContextForwardOptions frozen;
    frozen.freeze_pooled_input = true;

    Model d = init_model(cfg, ContextKind::parse("mean_linear_detach"), {}, seed);
    randomize_parameters(d, 50 + seed, 0.3);
    exact = exact && loss_grads(d, batch, {}) == loss_grads(d, batch, frozen);

    Model n = init_model(cfg, ContextKind::parse("mean_linear"), {}, seed);
    randomize_parameters(n, 50 + seed, 0.3);
    differ = differ && loss_grads(n, batch, {})[0] != loss_grads(n, batch, frozen)[0];
  }
  return {exact && differ, std::string("detach grads bitwise equal to frozen: ") + (exact ? "yes" : "no") +
                               ", mean_linear patch_weight grads differ: " + (differ ? "yes" : "no")};
}

// 3 -------------------------------------------------------------------------
Verdict layout_contract() {
  const ViTConfig cfg = toy_vit_config();
  const GroupedBatch batch = toy_batch(cfg, 3);
  bool lengths = true;
  for (const std::string& name : gradient_suite_kinds()) {
    const ContextKind kind = ContextKind::parse(name);
    if (!kind.adds_context_slot()) continue;
    Model m = init_model(cfg, kind, std::vector<GroupId>{0, 1}, 1);
    lengths = lengths && m.forward(batch).seq_len == cfg.num_patches() + 2;
  }
  Model none = init_model(cfg, ContextKind::parse("none"), {}, 1);
  randomize_parameters(none, 2, 0.3);
  const ForwardOutput plain = vit_forward(batch.images, none.backbone, none.head, cfg);
  const ContextForwardOutput ctx = none.forward(batch);
  const bool bitwise = ctx.logits.values() == plain.logits.values() &&
                       ctx.embedding.values() == plain.embedding.values() && ctx.seq_len == plain.seq_len;
  return {lengths && bitwise, std::string("context kinds use N+2 = ") + std::to_string(cfg.num_patches() + 2) +
                                  " tokens: " + (lengths ? "yes" : "no") +
                                  ", none bitwise equal to plain ViT: " + (bitwise ? "yes" : "no")};
}

// 4 -------------------------------------------------------------------------
Verdict permutation_invariance() {
  const ViTConfig cfg = toy_vit_config();
  const GroupedBatch batch = toy_batch(cfg, 4);
  const std::vector<std::size_t> order{4, 2, 1, 3, 0};
  std::vector<int> labels;
  std::vector<GroupId> groups;
  for (std::size_t i : order) {
    labels.push_back(batch.labels[i]);
    groups.push_back(batch.groups[i]);
  }
  const GroupedBatch shuffled = make_grouped_batch(index_select(batch.images, 0, order), labels, groups);

  double worst = 0.0;
  for (const std::string& name : amortized_kinds()) {
    Model m = init_model(cfg, ContextKind::parse(name), {}, 1);
    randomize_parameters(m, 2, 0.3);
    const Tensor a = m.infer(batch).logits, b = m.infer(shuffled).logits;
    const std::size_t k = cfg.num_classes;
    for (std::size_t r = 0; r < order.size(); ++r) {
      for (std::size_t j = 0; j < k; ++j) worst = std::max(worst, std::abs(b.data()[r * k + j] - a.data()[order[r] * k + j]));
    }

    // Patch order inside the pooled member set.
    const Tensor members = randn_seeded({3, cfg.num_patches(), cfg.dim}, 5, 1.0);
    std::vector<std::size_t> patches(cfg.num_patches());
    for (std::size_t i = 0; i < patches.size(); ++i) patches[i] = (i * 7 + 3) % patches.size();
    const std::vector<std::size_t> member_order{2, 0, 1};
    const Tensor permuted = index_select(index_select(members, 0, member_order), 1, patches);
    const ContextKind kind = ContextKind::parse(name);
    std::function<Tensor(const Tensor&)> infer;
    if (kind.method == ContextMethod::deep_sets) {
      infer = [&](const Tensor& x) { return deep_sets_infer(x, m.context.deep_sets[0], kind.detach); };
    } else if (kind.uses_linear_heads()) {
      infer = [&](const Tensor& x) {
        return apply_linear_head(infer_context_mean(x), m.context.linear_heads[0], kind.detach);
      };
    } else {
      infer = [](const Tensor& x) { return infer_context_mean(x); };
    }
    const Tensor ta = infer(members), tb = infer(permuted);
    for (std::size_t j = 0; j < cfg.dim; ++j) worst = std::max(worst, std::abs(ta.data()[j] - tb.data()[j]));
  }
  return {worst <= kPermutationTolerance, std::to_string(amortized_kinds().size()) +
                                              " amortized kinds, max deviation " + fmt("%.3g", worst)};
}

// 5 -------------------------------------------------------------------------
Verdict oracle_contract() {
  const ViTConfig cfg = toy_vit_config();
  const GroupedBatch seen = toy_batch(cfg, 6);
  const GroupedBatch unseen = make_grouped_batch(seen.images, seen.labels, {0, 0, 7, 7, 7});
  Model oracle = init_model(cfg, ContextKind::parse("oracle"), std::vector<GroupId>{0, 1}, 1);
  bool raised = false;
  try {
    oracle.infer(unseen);
  } catch (const UnknownContextError& e) {
    raised = e.group() == 7;
  }
  bool amortized_ok = true;
  std::string failures;
  for (const std::string& name : amortized_kinds()) {
    try {
      Model m = init_model(cfg, ContextKind::parse(name), {}, 1);
      randomize_parameters(m, 2, 0.3);
      m.infer(unseen);
      for (std::size_t i = 0; i < unseen.size(); ++i) {
        const std::vector<std::size_t> one{i};
        const GroupedBatch single = make_grouped_batch(index_select(unseen.images, 0, one), {unseen.labels[i]},
                                                       {unseen.groups[i]});
        const Tensor logits = m.infer(single).logits;
        for (double v : logits.data()) amortized_ok = amortized_ok && std::isfinite(v);
      }
    } catch (const std::exception& e) {
      amortized_ok = false;
      failures += " " + name;
    }
  }
  return {raised && amortized_ok, std::string("oracle raised UnknownContextError for group 7: ") +
                                      (raised ? "yes" : "no") + ", amortized kinds at batch size 1: " +
                                      (amortized_ok ? "ok" : "failed" + failures)};
}

// 6 and 8 share the trained models.
struct AblationOutcome {
  AblationResult result;
  double seconds = 0.0;
  DatasetSplit data;
};

AblationOutcome run_default_ablation() {
  const RunConfig rc;
  AblationOutcome out;
  out.data = generate_dataset(rc.data, rc.data_seed);
  AblationConfig cfg;
  cfg.kinds = rc.ablation_kinds;
  cfg.seeds = rc.ablation_seeds;
  cfg.vit = rc.vit_config();
  cfg.train = rc.train_config();
  cfg.keep_models = true;
  cfg.progress = [](const std::string& msg) { std::fprintf(stderr, "  %s\n", msg.c_str()); };
  const auto start = std::chrono::steady_clock::now();
  out.result = run_ablation(out.data, cfg);
  out.seconds = seconds_since(start);
  return out;
}

Verdict ood_ordering(const AblationOutcome& a) {
  const char* names[] = {"none", "mean", "mean_linear", "mean_linear_detach", "layerwise_mean_linear_detach"};
  double med[5];
  bool complete = true;
  for (int i = 0; i < 5; ++i) {
    const AblationRow* row = a.result.row(names[i]);
    complete = complete && row != nullptr && row->runs_ok == 3 && row->runs_failed == 0;
    med[i] = row ? row->ood_median : 0.0;
  }
  const bool order = med[0] < med[1] && med[1] <= med[2] && med[2] < med[3] && med[3] <= med[4];
  const double margin = med[3] - med[0];
  const bool pass = complete && order && margin >= kOodMarginPoints && a.seconds < kAblationSeconds;
  std::string detail = "median OOD";
  for (int i = 0; i < 5; ++i) detail += std::string(" ") + names[i] + "=" + fmt("%.4f", med[i]);
  detail += ", detach - none = " + fmt("%.4f", margin) + ", " + fmt("%.0f", a.seconds) + " s";
  const char* rel[] = {"<", "<=", "<", "<="};
  const bool link[] = {med[0] < med[1], med[1] <= med[2], med[2] < med[3], med[3] <= med[4]};
  for (int i = 0; i < 4; ++i) {
    if (!link[i]) detail += std::string(", violated ") + names[i] + " " + rel[i] + " " + names[i + 1];
  }
  if (!complete) detail += ", some runs failed";
  return {pass, detail};
}

// 7 -------------------------------------------------------------------------
Verdict layerwise_check() {
  const ViTConfig cfg = toy_vit_config();
  const GroupedBatch batch = toy_batch(cfg, 8);
  Model flat = init_model(cfg, ContextKind::parse("mean_linear_detach"), {}, 1);
  randomize_parameters(flat, 2, 0.3);
  loss_grads(flat, batch, {});
  bool zero = true;
  for (std::size_t l = 1; l < cfg.depth; ++l) {
    for (double g : flat.context.linear_heads[l].weight.grad()) zero = zero && g == 0.0;
    for (double g : flat.context.linear_heads[l].bias.grad()) zero = zero && g == 0.0;
  }
  Model deep = init_model(cfg, ContextKind::parse("layerwise_mean_linear_detach"), {}, 1);
  randomize_parameters(deep, 2, 0.3);
  const ContextForwardOutput a = flat.infer(batch), b = deep.infer(batch);
  const bool same_shape = a.logits.shape() == b.logits.shape() && a.seq_len == b.seq_len;
  const bool changed = a.logits.values() != b.logits.values();
  return {zero && same_shape && changed, std::string("heads l>=1 zero grad without layerwise: ") +
                                              (zero ? "yes" : "no") + ", layerwise logits differ: " +
                                              (changed ? "yes" : "no") + ", shapes equal: " +
                                              (same_shape ? "yes" : "no")};
}

// 8 -------------------------------------------------------------------------
Verdict token_analysis(const AblationOutcome& a) {
  const AblationRun* run = nullptr;
  for (const AblationRun& r : a.result.runs) {
    if (r.kind == "mean_linear_detach" && r.ok && r.model) {
      run = &r;
      break;
    }
  }
  if (run == nullptr) return {false, "no trained mean_linear_detach model"};
  const RunConfig rc;
  std::vector<Sample> pool = a.data.id_test;
  pool.insert(pool.end(), a.data.ood_test.begin(), a.data.ood_test.end());
  const ContextTokenSet set = collect_context_tokens(*run->model, pool, rc.token_batch_size,
                                                     rc.token_batches_per_group, rc.token_layer, run->seed);
  const std::set<GroupId> distinct(set.groups.begin(), set.groups.end());
  const SeparationScore sep = separation_score(set.tokens, set.groups);
  const PcaResult pca = pca_project(set.tokens, 2);
  const double explained = pca.explained_variance_ratio[0] + pca.explained_variance_ratio[1];
  double ortho = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < pca.components[i].size(); ++k) dot += pca.components[i][k] * pca.components[j][k];
      ortho = std::max(ortho, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  }
  const bool separated = sep.infinite || sep.ratio > kMinSeparation;
  const bool pass = a.data.train_group_ids.size() >= 4 && separated && explained >= kMinExplained &&
                    ortho <= kOrthonormalTolerance;
  return {pass, std::to_string(distinct.size()) + " groups, " + std::to_string(set.tokens.size()) +
                    " tokens, separation " + (sep.infinite ? std::string("inf") : fmt("%.3g", sep.ratio)) +
                    ", 2-PC explained " + fmt("%.4f", explained) + ", orthonormality error " + fmt("%.3g", ortho)};
}

// 9 -------------------------------------------------------------------------
Verdict schedule_endpoints() {
  const TrainConfig cfg;
  const std::size_t steps_per_epoch = 47;
  const Schedule s(cfg, steps_per_epoch);
  const std::size_t last = s.total_steps() - 1;
  const ScheduleValues first = s.at(0), warm = s.at(s.warmup_steps()), end = s.at(last);
  const bool pass = first.lr == 0.0 && std::abs(warm.lr - cfg.base_lr) <= kScheduleTolerance &&
                    std::abs(end.lr - cfg.final_lr) <= kScheduleTolerance &&
                    std::abs(first.weight_decay - cfg.weight_decay_start) <= kScheduleTolerance &&
                    std::abs(end.weight_decay - cfg.weight_decay_end) <= kScheduleTolerance &&
                    s.warmup_steps() == cfg.warmup_epochs * steps_per_epoch;
  return {pass, "lr " + fmt("%.3g", first.lr) + " -> " + fmt("%.6g", warm.lr) + " at step " +
                    std::to_string(s.warmup_steps()) + " -> " + fmt("%.6g", end.lr) + ", wd " +
                    fmt("%.6g", first.weight_decay) + " -> " + fmt("%.6g", end.weight_decay)};
}

// 10 ------------------------------------------------------------------------
Verdict reproducibility() {
  RunConfig rc;
  rc.kind = "mean_linear_detach";
  rc.data.images_per_group = 64;
  rc.train.epochs = 3;
  rc.train.warmup_epochs = 1;
  rc.vit.dim = 16;
  rc.vit.depth = 2;
  rc.vit.heads = 2;
  rc.seed = 11;
  rc.validate();
  const DatasetSplit data = generate_dataset(rc.data, rc.data_seed);
  auto once = [&] {
    Model m = init_model(rc.vit_config(), rc.context_kind(), data.train_group_ids, rc.seed);
    return fine_tune(std::move(m), data, rc.train_config());
  };
  const TrainResult a = once(), b = once();
  const bool csv = a.log.to_csv() == b.log.to_csv();

  const Checkpoint ck = checkpoint_from_model(a.model, rc.hash(), rc.dump());
  const std::string bytes = encode_checkpoint(ck);
  Model restored = model_from_checkpoint(decode_checkpoint(bytes));
  const std::string again = encode_checkpoint(checkpoint_from_model(restored, rc.hash(), rc.dump()));
  const bool round_trip = again == bytes;
  return {csv && round_trip, std::string("metrics CSV bitwise identical: ") + (csv ? "yes" : "no") +
                                 ", checkpoint re-encode byte identical (" + std::to_string(bytes.size()) +
                                 " bytes): " + (round_trip ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int c) { return selected.empty() || selected.count(c) > 0; };

  const char* titles[] = {"",
                          "gradient oracle suite",
                          "detach semantics",
                          "sequence layout",
                          "permutation invariance",
                          "oracle vs amortized",
                          "directional OOD ordering",
                          "layerwise isolation",
                          "context token analysis",
                          "schedule endpoints",
                          "reproducibility"};
  bool all = true;
  auto report = [&](int c, const std::function<Verdict()>& fn) {
    if (!wanted(c)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    all = all && v.pass;
    std::printf("criterion %d %s: %s (%s)\n", c, titles[c], v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
  };

  report(1, gradient_suite);
  report(2, detach_semantics);
  report(3, layout_contract);
  report(4, permutation_invariance);
  report(5, oracle_contract);
  report(7, layerwise_check);
  report(9, schedule_endpoints);
  report(10, reproducibility);
  if (wanted(6) || wanted(8)) {
    std::optional<AblationOutcome> ablation;
    std::string error;
    try {
      ablation = run_default_ablation();
    } catch (const std::exception& e) {
      error = e.what();
    }
    report(6, [&] { return ablation ? ood_ordering(*ablation) : Verdict{false, "ablation failed: " + error}; });
    report(8, [&] { return ablation ? token_analysis(*ablation) : Verdict{false, "ablation failed: " + error}; });
    if (ablation && wanted(6)) std::printf("%s", ablation->result.to_csv().c_str());
  }
  return all ? 0 : 1;
}
