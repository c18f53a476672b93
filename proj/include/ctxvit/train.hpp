#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctxvit/data.hpp"
#include "ctxvit/model.hpp"

namespace ctxvit {

enum class TrainMode { finetune, probe };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::size_t eval_batch_size = 64;
  double base_lr = 1e-3;
  double final_lr = 1e-5;
  std::size_t warmup_epochs = 2;
  double weight_decay_start = 0.04;
  double weight_decay_end = 0.4;
  std::uint64_t seed = 0;
  SamplerKind sampler = SamplerKind::uniform;
  TrainMode mode = TrainMode::finetune;
  // Linear probing: SGD with momentum and a cosine-annealed learning rate.
  std::size_t probe_epochs = 20;
  double probe_lr = 0.005;
  double probe_momentum = 0.9;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Loss and optimizers

// Mean of -log softmax(logits)[label] over the batch; logits [B, K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
// Single example, logits [K].
Tensor cross_entropy(const Tensor& logits, int label);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One AdamW update from the gradients stored on `params`. Decay is decoupled
// (p <- p - lr * wd * p) and skipped for parameters with decay == false.
void adamw_step(std::span<const NamedParam> params, OptimState& state, double lr, double weight_decay,
                const AdamWHyper& hyper = {});

struct MomentumState {
  std::vector<std::vector<double>> velocity;
};

// v <- momentum * v + g; p <- p - lr * v
void sgd_momentum_step(std::span<const NamedParam> params, MomentumState& state, double lr, double momentum);

// ---------------------------------------------------------------------------
// Schedules

struct ScheduleValues {
  double lr = 0.0;
  double weight_decay = 0.0;
};

// Linear warmup from 0 to base_lr over the warmup steps, then cosine decay to
// final_lr at the last step; weight decay follows a cosine from its start to
// its end value over the whole run.
class Schedule {
 public:
  Schedule(const TrainConfig& config, std::size_t steps_per_epoch);
  ScheduleValues at(std::size_t step) const;
  std::size_t total_steps() const { return total_steps_; }
  std::size_t warmup_steps() const { return warmup_steps_; }

 private:
  double base_lr_, final_lr_, wd_start_, wd_end_;
  std::size_t total_steps_, warmup_steps_;
};

ScheduleValues schedules(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch);

// Cosine annealing from `lr` at step 0 to 0 at the last step.
double cosine_annealed(double lr, std::size_t step, std::size_t total_steps);

// ---------------------------------------------------------------------------
// Metrics log

struct MetricRow {
  long epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
  std::string kind;
};

struct MetricsLog {
  std::vector<MetricRow> rows;

  void add(long epoch, std::string split, std::string metric, double value, std::uint64_t seed, std::string kind);
  // Header: epoch,split,metric,value,seed,kind. Values printed with 17
  // significant digits so identical runs produce identical files.
  std::string to_csv(bool header = true) const;
};

// ---------------------------------------------------------------------------
// Training loops

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  Model model;  // best validation checkpoint
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::vector<double> epoch_train_loss;
  std::vector<double> step_loss;
  MetricsLog log;
};

// Trains backbone, context parameters and head jointly with AdamW; keeps the
// epoch with the best validation accuracy.
TrainResult fine_tune(Model model, const DatasetSplit& data, const TrainConfig& config);

struct ProbeResult {
  Model model;  // the frozen model carrying the trained probe head
  std::vector<double> epoch_train_loss;
  MetricsLog log;
};

// Trains a fresh affine head on a frozen backbone + context model.
ProbeResult linear_probe(const Model& frozen, const DatasetSplit& data, const TrainConfig& config);

}  // namespace ctxvit
