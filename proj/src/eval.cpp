#include "ctxvit/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include "ctxvit/rng.hpp"

namespace ctxvit {

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("argmax_rows: expected [B, K] logits");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

MetricsReport metrics_from_predictions(std::span<const int> predictions, std::span<const int> labels,
                                       std::span<const GroupId> groups) {
  if (predictions.size() != labels.size() || labels.size() != groups.size()) {
    throw std::invalid_argument("metrics_from_predictions: length mismatch");
  }
  if (labels.empty()) throw std::invalid_argument("metrics_from_predictions: empty split");
  MetricsReport r;
  std::map<GroupId, GroupAccuracy> by_group;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool hit = predictions[i] == labels[i];
    GroupAccuracy& g = by_group[groups[i]];
    g.group = groups[i];
    g.total += 1;
    g.correct += hit ? 1 : 0;
    r.correct += hit ? 1 : 0;
  }
  r.total = labels.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  r.worst_group_accuracy = 1.0;
  bool first = true;
  for (auto& [id, g] : by_group) {
    g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.total);
    if (first || g.accuracy < r.worst_group_accuracy) {
      r.worst_group_accuracy = g.accuracy;
      r.worst_group = id;
      first = false;
    }
    r.per_group.push_back(g);
  }
  return r;
}

MetricsReport compute_metrics(const Model& model, std::span<const Sample> split, std::size_t eval_batch_size,
                              std::uint64_t seed) {
  if (split.empty()) throw std::invalid_argument("compute_metrics: empty split");
  if (eval_batch_size == 0) throw std::invalid_argument("compute_metrics: batch size must be >= 1");
  const std::size_t h = model.config.image_h, w = model.config.image_w, c = model.config.channels;
  std::vector<int> preds, labels;
  std::vector<GroupId> groups;
  NoGradScope no_grad;
  for (const auto& indices : uniform_sampler(split, eval_batch_size, seed)) {
    const GroupedBatch batch = gather_batch(split, indices, h, w, c);
    const std::vector<int> p = argmax_rows(model.infer(batch).logits);
    preds.insert(preds.end(), p.begin(), p.end());
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
    groups.insert(groups.end(), batch.groups.begin(), batch.groups.end());
  }
  return metrics_from_predictions(preds, labels, groups);
}

EvalSummary evaluate_model(const Model& model, const DatasetSplit& data, std::size_t eval_batch_size,
                           std::uint64_t seed) {
  EvalSummary s;
  if (!data.val.empty()) s.val = compute_metrics(model, data.val, eval_batch_size, seed);
  s.id_test = compute_metrics(model, data.id_test, eval_batch_size, seed);
  s.ood_test = compute_metrics(model, data.ood_test, eval_batch_size, seed);
  s.ood_gap = s.id_test.accuracy - s.ood_test.accuracy;
  return s;
}

void append_summary(MetricsLog& log, const EvalSummary& s, long epoch, std::uint64_t seed, const std::string& kind) {
  if (s.val.total > 0) log.add(epoch, "val", "accuracy", s.val.accuracy, seed, kind);
  log.add(epoch, "id_test", "accuracy", s.id_test.accuracy, seed, kind);
  log.add(epoch, "id_test", "worst_group_accuracy", s.id_test.worst_group_accuracy, seed, kind);
  log.add(epoch, "ood_test", "accuracy", s.ood_test.accuracy, seed, kind);
  log.add(epoch, "ood_test", "worst_group_accuracy", s.ood_test.worst_group_accuracy, seed, kind);
  for (const GroupAccuracy& g : s.ood_test.per_group) {
    log.add(epoch, "ood_test", "group" + std::to_string(g.group) + "_accuracy", g.accuracy, seed, kind);
  }
  log.add(epoch, "ood_test", "ood_gap", s.ood_gap, seed, kind);
}

// ===========================================================================
// Ablation

std::vector<std::string> ablation_row_order(std::vector<std::string> kinds) {
  static const std::vector<std::string> canonical = {"none",
                                                     "mean",
                                                     "mean_linear",
                                                     "mean_linear_detach",
                                                     "layerwise_mean_linear_detach",
                                                     "deep_sets",
                                                     "deep_sets_detach",
                                                     "oracle",
                                                     "ema",
                                                     "in_context_patches"};
  auto rank = [](const std::string& k) {
    auto it = std::find(canonical.begin(), canonical.end(), k);
    return static_cast<std::size_t>(it - canonical.begin());
  };
  std::stable_sort(kinds.begin(), kinds.end(),
                   [&](const std::string& a, const std::string& b) { return rank(a) < rank(b); });
  kinds.erase(std::unique(kinds.begin(), kinds.end()), kinds.end());
  return kinds;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) {
    mean = sd = std::numeric_limits<double>::quiet_NaN();
    return;
  }
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
}

}  // namespace

const AblationRow* AblationResult::row(const std::string& kind) const {
  for (const AblationRow& r : rows) {
    if (r.kind == kind) return &r;
  }
  return nullptr;
}

std::string AblationResult::to_csv() const {
  std::ostringstream os;
  os << "kind,runs_ok,runs_failed,ood_median,ood_mean,ood_std,id_median,id_mean,id_std,worst_group_ood_median,"
        "seconds\n";
  char buf[512];
  for (const AblationRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f\n", r.kind.c_str(), r.runs_ok,
                  r.runs_failed, r.ood_median, r.ood_mean, r.ood_std, r.id_median, r.id_mean, r.id_std,
                  r.worst_group_ood_median, r.seconds);
    os << buf;
  }
  return os.str();
}

AblationResult run_ablation(const DatasetSplit& data, const AblationConfig& config) {
  if (config.kinds.empty()) throw std::invalid_argument("run_ablation: no kinds given");
  if (config.seeds.empty()) throw std::invalid_argument("run_ablation: no seeds given");
  AblationResult result;
  for (const std::string& name : ablation_row_order(config.kinds)) {
    AblationRow row;
    row.kind = name;
    std::vector<double> ood, id, worst;
    for (std::uint64_t seed : config.seeds) {
      AblationRun run;
      run.kind = name;
      run.seed = seed;
      if (config.progress) config.progress("training " + name + " seed " + std::to_string(seed));
      const auto start = std::chrono::steady_clock::now();
      try {
        const ContextKind kind = ContextKind::parse(name);
        TrainConfig tc = config.train;
        tc.seed = seed;
        Model init = init_model(config.vit, kind, data.train_group_ids, seed);
        TrainResult tr = fine_tune(std::move(init), data, tc);
        run.summary = evaluate_model(tr.model, data, tc.eval_batch_size, Rng(seed).split("eval").next_u64());
        run.log = std::move(tr.log);
        append_summary(run.log, run.summary, static_cast<long>(tr.best_epoch), seed, name);
        if (config.keep_models) run.model = std::move(tr.model);
        run.ok = true;
        ood.push_back(run.summary.ood_test.accuracy);
        id.push_back(run.summary.id_test.accuracy);
        worst.push_back(run.summary.ood_test.worst_group_accuracy);
        ++row.runs_ok;
      } catch (const std::exception& e) {
        run.error = e.what();
        ++row.runs_failed;
        if (config.progress) config.progress("run failed: " + run.error);
      }
      run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      row.seconds += run.seconds;
      result.runs.push_back(std::move(run));
    }
    row.ood_median = median(ood);
    row.id_median = median(id);
    row.worst_group_ood_median = median(worst);
    mean_std(ood, row.ood_mean, row.ood_std);
    mean_std(id, row.id_mean, row.id_std);
    result.rows.push_back(row);
  }
  return result;
}

// ===========================================================================
// Sweep

std::vector<SweepPoint> batch_size_sweep(const Model& model, std::span<const Sample> split,
                                         std::span<const std::size_t> sizes, std::uint64_t seed) {
  if (!model.kind.amortized()) {
    throw std::invalid_argument("batch_size_sweep: kind '" + model.kind.name() + "' does not infer context");
  }
  std::vector<SweepPoint> out;
  for (std::size_t s : sizes) {
    if (s < 1) throw std::invalid_argument("batch_size_sweep: batch size must be >= 1");
    out.push_back(SweepPoint{s, compute_metrics(model, split, s, seed)});
  }
  return out;
}

// ===========================================================================
// Context tokens

ContextTokenSet collect_context_tokens(const Model& model, std::span<const Sample> samples, std::size_t batch_size,
                                       std::size_t batches_per_group, std::size_t layer, std::uint64_t seed) {
  if (!model.kind.adds_context_slot()) {
    throw std::invalid_argument("collect_context_tokens: kind '" + model.kind.name() + "' has no context token");
  }
  if (batch_size == 0) throw std::invalid_argument("collect_context_tokens: batch size must be >= 1");
  std::map<GroupId, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < samples.size(); ++i) members[samples[i].group].push_back(i);
  const std::size_t h = model.config.image_h, w = model.config.image_w, c = model.config.channels;
  const Rng root(seed);
  ContextTokenSet out;
  NoGradScope no_grad;
  for (const auto& [group, idx] : members) {
    Rng rng = root.split(group);
    for (std::size_t b = 0; b < batches_per_group; ++b) {
      std::vector<std::size_t> pool = idx;
      rng.shuffle(pool);
      pool.resize(std::min(batch_size, pool.size()));
      const GroupedBatch batch = gather_batch(samples, pool, h, w, c);
      const ContextForwardOutput fwd = model.infer(batch);
      if (layer >= fwd.context_tokens.size()) {
        throw std::invalid_argument("collect_context_tokens: layer " + std::to_string(layer) + " out of range (" +
                                    std::to_string(fwd.context_tokens.size()) + " inference steps)");
      }
      const Tensor& t = fwd.context_tokens[layer];
      const std::size_t d = t.dim(1);
      out.groups.push_back(group);
      out.tokens.emplace_back(t.data().begin(), t.data().begin() + static_cast<std::ptrdiff_t>(d));
    }
  }
  return out;
}

SeparationScore separation_score(std::span<const std::vector<double>> tokens, std::span<const GroupId> groups) {
  if (tokens.size() != groups.size()) throw std::invalid_argument("separation_score: length mismatch");
  std::map<GroupId, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);
  if (members.size() < 2) throw std::invalid_argument("separation_score: need at least two groups");
  for (const auto& [g, idx] : members) {
    if (idx.size() < 2) throw std::invalid_argument("separation_score: need at least two tokens per group");
  }
  const std::size_t d = tokens[0].size();
  std::vector<std::vector<double>> centroids;
  SeparationScore s;
  bool all_within_identical = true;
  for (const auto& [g, idx] : members) {
    std::vector<double> cen(d, 0.0);
    bool identical = true;
    for (std::size_t i : idx) {
      if (tokens[i].size() != d) throw std::invalid_argument("separation_score: ragged tokens");
      for (std::size_t j = 0; j < d; ++j) cen[j] += tokens[i][j];
      if (tokens[i] != tokens[idx[0]]) identical = false;
    }
    all_within_identical = all_within_identical && identical;
    for (double& x : cen) x /= static_cast<double>(idx.size());
    double var = 0.0;
    for (std::size_t i : idx) {
      for (std::size_t j = 0; j < d; ++j) var += (tokens[i][j] - cen[j]) * (tokens[i][j] - cen[j]);
    }
    s.within += var / static_cast<double>(idx.size());
    // Averaging identical rows can round; keep the exact row so the flags below see exact equality.
    centroids.push_back(identical ? tokens[idx[0]] : cen);
  }
  s.within /= static_cast<double>(members.size());
  if (all_within_identical) s.within = 0.0;

  std::vector<double> grand(d, 0.0);
  for (const auto& cen : centroids) {
    for (std::size_t j = 0; j < d; ++j) grand[j] += cen[j];
  }
  for (double& x : grand) x /= static_cast<double>(centroids.size());
  bool all_centroids_identical = true;
  for (const auto& cen : centroids) {
    if (cen != centroids[0]) all_centroids_identical = false;
    for (std::size_t j = 0; j < d; ++j) s.between += (cen[j] - grand[j]) * (cen[j] - grand[j]);
  }
  s.between /= static_cast<double>(centroids.size());
  if (all_within_identical && all_centroids_identical) s.between = 0.0;

  if (s.within == 0.0) {
    if (s.between == 0.0) {
      s.degenerate = true;
      s.ratio = std::numeric_limits<double>::quiet_NaN();
    } else {
      s.infinite = true;
      s.ratio = std::numeric_limits<double>::infinity();
    }
  } else {
    s.ratio = s.between / s.within;
  }
  return s;
}

}  // namespace ctxvit
