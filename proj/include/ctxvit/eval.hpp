#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxvit/data.hpp"
#include "ctxvit/model.hpp"
#include "ctxvit/train.hpp"

namespace ctxvit {

std::vector<int> argmax_rows(const Tensor& logits);

struct GroupAccuracy {
  GroupId group = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<GroupAccuracy> per_group;  // ascending group id
  double worst_group_accuracy = 0.0;
  GroupId worst_group = 0;
};

MetricsReport metrics_from_predictions(std::span<const int> predictions, std::span<const int> labels,
                                       std::span<const GroupId> groups);

// Evaluation-mode accuracy over `split` using shuffled batches of
// `eval_batch_size`; each batch infers context from its own group members.
MetricsReport compute_metrics(const Model& model, std::span<const Sample> split, std::size_t eval_batch_size,
                              std::uint64_t seed = 0);

struct EvalSummary {
  MetricsReport val;
  MetricsReport id_test;
  MetricsReport ood_test;
  double ood_gap = 0.0;  // id_test - ood_test accuracy
};

EvalSummary evaluate_model(const Model& model, const DatasetSplit& data, std::size_t eval_batch_size,
                           std::uint64_t seed = 0);
void append_summary(MetricsLog& log, const EvalSummary& summary, long epoch, std::uint64_t seed,
                    const std::string& kind);

// ---------------------------------------------------------------------------
// Ablation grid

// Reorders kind names into the canonical table order; unknown names keep
// their relative order at the end.
std::vector<std::string> ablation_row_order(std::vector<std::string> kinds);

struct AblationConfig {
  std::vector<std::string> kinds;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ViTConfig vit;
  TrainConfig train;
  bool keep_models = false;
  std::function<void(const std::string&)> progress;
};

struct AblationRun {
  std::string kind;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  EvalSummary summary;
  double seconds = 0.0;
  MetricsLog log;
  std::optional<Model> model;
};

struct AblationRow {
  std::string kind;
  std::size_t runs_ok = 0;
  std::size_t runs_failed = 0;
  double ood_median = 0.0, ood_mean = 0.0, ood_std = 0.0;
  double id_median = 0.0, id_mean = 0.0, id_std = 0.0;
  double worst_group_ood_median = 0.0;
  double seconds = 0.0;  // total over seeds
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<AblationRun> runs;

  const AblationRow* row(const std::string& kind) const;
  std::string to_csv() const;
};

// Each (kind, seed) run starts from init_model(..., seed); a failing run is
// recorded and the grid continues.
AblationResult run_ablation(const DatasetSplit& data, const AblationConfig& config);

double median(std::vector<double> values);

// ---------------------------------------------------------------------------
// Test-batch-size sweep

struct SweepPoint {
  std::size_t batch_size = 0;
  MetricsReport report;
};

std::vector<SweepPoint> batch_size_sweep(const Model& model, std::span<const Sample> split,
                                         std::span<const std::size_t> sizes, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Context-token analysis

struct ContextTokenSet {
  std::vector<GroupId> groups;
  std::vector<std::vector<double>> tokens;
};

// One token per evaluation batch drawn from a single group; `layer` selects
// the inference step (0 = pooled patch embeddings).
ContextTokenSet collect_context_tokens(const Model& model, std::span<const Sample> samples, std::size_t batch_size,
                                       std::size_t batches_per_group, std::size_t layer = 0,
                                       std::uint64_t seed = 0);

struct SeparationScore {
  double ratio = 0.0;
  double between = 0.0;  // variance of group centroids
  double within = 0.0;   // mean within-group variance
  bool infinite = false;
  bool degenerate = false;
};

SeparationScore separation_score(std::span<const std::vector<double>> tokens, std::span<const GroupId> groups);

}  // namespace ctxvit
