#include "ctxvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "ctxvit/eval.hpp"
#include "ctxvit/ops.hpp"

namespace ctxvit {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("TrainConfig: " + msg); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0 || eval_batch_size == 0) fail("batch sizes must be positive");
  if (warmup_epochs >= epochs) fail("warmup_epochs must be smaller than epochs");
  if (!(base_lr > 0.0) || !(final_lr > 0.0)) fail("learning rates must be positive");
  if (weight_decay_start < 0.0 || weight_decay_end < 0.0) fail("weight decay must be non-negative");
  if (probe_epochs == 0 || !(probe_lr > 0.0)) fail("probe_epochs and probe_lr must be positive");
  if (probe_momentum < 0.0 || probe_momentum >= 1.0) fail("probe_momentum must lie in [0, 1)");
}

// ===========================================================================
// Loss

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw std::invalid_argument("cross_entropy: logits must be [B, K] with one label per row");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<double> probs(b * k);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                  std::to_string(k) + ")");
    }
    const double* row = logits.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      sum += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= sum;
    total += std::log(sum) + mx - row[label];
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  const bool rec = should_record({&logits});
  Tensor loss = Tensor::scalar(total * inv_b, rec);
  if (rec) {
    detail::NodePtr ln = logits.node();
    std::vector<int> lab(labels.begin(), labels.end());
    active_tape()->record(loss, {ln},
                          [ln, probs = std::move(probs), lab = std::move(lab), b, k, inv_b](std::span<const double> g) {
                            auto& gl = ln->grad_buffer();
                            for (std::size_t i = 0; i < b; ++i) {
                              for (std::size_t j = 0; j < k; ++j) {
                                const double onehot = static_cast<int>(j) == lab[i] ? 1.0 : 0.0;
                                gl[i * k + j] += g[0] * inv_b * (probs[i * k + j] - onehot);
                              }
                            }
                          });
  }
  return loss;
}

Tensor cross_entropy(const Tensor& logits, int label) {
  const int labels[] = {label};
  return cross_entropy(reshape(logits, {1, logits.numel()}), labels);
}

// ===========================================================================
// Optimizers

namespace {

void ensure_slots(std::vector<std::vector<double>>& slots, std::span<const NamedParam> params) {
  if (slots.empty()) {
    for (const NamedParam& p : params) slots.emplace_back(p.tensor.numel(), 0.0);
  }
  if (slots.size() != params.size()) {
    throw std::invalid_argument("optimizer state does not match the parameter list");
  }
}

void check_finite(const NamedParam& p) {
  for (double g : p.tensor.grad_view()) {
    if (!std::isfinite(g)) {
      throw NonFiniteGradient("non-finite gradient in parameter '" + p.name + "'");
    }
  }
}

}  // namespace

void adamw_step(std::span<const NamedParam> params, OptimState& state, double lr, double weight_decay,
                const AdamWHyper& hyper) {
  if (!(lr > 0.0) || weight_decay < 0.0) {
    throw std::invalid_argument("adamw_step: need lr > 0 and weight_decay >= 0");
  }
  ensure_slots(state.first_moment, params);
  ensure_slots(state.second_moment, params);
  for (const NamedParam& p : params) check_finite(p);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor tensor = params[i].tensor;
    if (!tensor.requires_grad()) continue;
    std::span<const double> g = tensor.grad_view();
    std::span<double> w = tensor.mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const double decay = params[i].decay ? lr * weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
      const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + hyper.eps);
      w[j] -= decay * w[j];
      w[j] -= lr * update;
    }
  }
}

void sgd_momentum_step(std::span<const NamedParam> params, MomentumState& state, double lr, double momentum) {
  ensure_slots(state.velocity, params);
  for (const NamedParam& p : params) check_finite(p);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor tensor = params[i].tensor;
    if (!tensor.requires_grad()) continue;
    std::span<const double> g = tensor.grad_view();
    std::span<double> w = tensor.mutable_data();
    auto& vel = state.velocity[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      vel[j] = momentum * vel[j] + (g.empty() ? 0.0 : g[j]);
      w[j] -= lr * vel[j];
    }
  }
}

// ===========================================================================
// Schedules

Schedule::Schedule(const TrainConfig& config, std::size_t steps_per_epoch)
    : base_lr_(config.base_lr),
      final_lr_(config.final_lr),
      wd_start_(config.weight_decay_start),
      wd_end_(config.weight_decay_end),
      total_steps_(config.epochs * steps_per_epoch),
      warmup_steps_(config.warmup_epochs * steps_per_epoch) {
  if (steps_per_epoch == 0) throw std::invalid_argument("Schedule: steps_per_epoch must be positive");
}

ScheduleValues Schedule::at(std::size_t step) const {
  ScheduleValues out;
  const std::size_t last = total_steps_ - 1;
  if (step < warmup_steps_) {
    out.lr = base_lr_ * static_cast<double>(step) / static_cast<double>(warmup_steps_);
  } else {
    const std::size_t span = last > warmup_steps_ ? last - warmup_steps_ : 0;
    const double t =
        span == 0 ? 1.0 : std::min(1.0, static_cast<double>(step - warmup_steps_) / static_cast<double>(span));
    out.lr = final_lr_ + (base_lr_ - final_lr_) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  const double tw = last == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(last));
  out.weight_decay = wd_end_ + (wd_start_ - wd_end_) * 0.5 * (1.0 + std::cos(std::numbers::pi * tw));
  return out;
}

ScheduleValues schedules(std::size_t step, const TrainConfig& config, std::size_t steps_per_epoch) {
  return Schedule(config, steps_per_epoch).at(step);
}

double cosine_annealed(double lr, std::size_t step, std::size_t total_steps) {
  if (total_steps <= 1) return lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ===========================================================================
// Metrics log

void MetricsLog::add(long epoch, std::string split, std::string metric, double value, std::uint64_t seed,
                     std::string kind) {
  rows.push_back(MetricRow{epoch, std::move(split), std::move(metric), value, seed, std::move(kind)});
}

std::string MetricsLog::to_csv(bool header) const {
  std::ostringstream os;
  if (header) os << "epoch,split,metric,value,seed,kind\n";
  char buf[64];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.epoch << ',' << r.split << ',' << r.metric << ',' << buf << ',' << r.seed << ',' << r.kind << '\n';
  }
  return os.str();
}

// ===========================================================================
// Loops

namespace {

void zero_grads(std::span<const NamedParam> params) {
  for (const NamedParam& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::vector<int> pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return correct;
}

}  // namespace

TrainResult fine_tune(Model model, const DatasetSplit& data, const TrainConfig& config) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("fine_tune: empty training split");
  model.set_trainable(true, true);
  const std::vector<NamedParam> params = model.parameters();
  const std::string kind = model.kind.name();
  const Rng root(config.seed);
  const Rng epoch_rng = root.split("epoch");
  const Rng sample_rng = root.split("in_context");
  const std::uint64_t eval_seed = root.split("eval").next_u64();

  const std::size_t steps_per_epoch =
      make_batches(data.train, config.batch_size, config.sampler, epoch_rng.split(std::uint64_t{1}).key()).size();
  const Schedule schedule(config, steps_per_epoch);

  TrainResult result;
  OptimState state;
  std::size_t step = 0;
  double best_val = -1.0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const BatchPlan plan = make_batches(data.train, config.batch_size, config.sampler, epoch_rng.split(epoch).key());
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (const auto& indices : plan) {
      const GroupedBatch batch = gather_batch(data.train, indices, data.image_h, data.image_w, data.channels);
      auto diverged = [&](const std::string& why) {
        return TrainingDiverged("training diverged: kind " + kind + ", seed " + std::to_string(config.seed) +
                                ", epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " + why);
      };
      Tape tape;
      double loss_value = 0.0;
      try {
        TapeScope scope(tape);
        ContextForwardOptions opts;
        opts.training = true;
        opts.sample_seed = sample_rng.split(step).key();
        const ContextForwardOutput out = model.forward(batch, opts);
        const Tensor loss = cross_entropy(out.logits, batch.labels);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw diverged("loss " + std::to_string(loss_value));
        tape.backward(loss);
        correct += count_correct(out.logits, batch.labels);
      } catch (const std::domain_error& e) {
        // Non-finite activations (softmax rejects them).
        throw diverged(e.what());
      }
      const ScheduleValues sv = schedule.at(step);
      try {
        adamw_step(params, state, std::max(sv.lr, 1e-300), sv.weight_decay);
      } catch (const NonFiniteGradient& e) {
        throw diverged(e.what());
      }
      zero_grads(params);
      result.step_loss.push_back(loss_value);
      loss_sum += loss_value * static_cast<double>(batch.size());
      seen += batch.size();
      ++step;
    }
    const double train_loss = loss_sum / static_cast<double>(seen);
    result.epoch_train_loss.push_back(train_loss);
    const auto e = static_cast<long>(epoch);
    result.log.add(e, "train", "loss", train_loss, config.seed, kind);
    result.log.add(e, "train", "accuracy", static_cast<double>(correct) / static_cast<double>(seen), config.seed,
                   kind);
    double val_acc = 0.0;
    if (!data.val.empty()) {
      val_acc = compute_metrics(model, data.val, config.eval_batch_size, eval_seed).accuracy;
      result.log.add(e, "val", "accuracy", val_acc, config.seed, kind);
    }
    if (data.val.empty() || val_acc > best_val) {
      best_val = val_acc;
      result.best_epoch = epoch;
      result.model = model.clone();
    }
  }
  result.best_val_accuracy = best_val;
  return result;
}

ProbeResult linear_probe(const Model& frozen, const DatasetSplit& data, const TrainConfig& config) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("linear_probe: empty training split");
  ProbeResult result;
  result.model = frozen.clone();
  Model& model = result.model;
  const Rng root(config.seed);
  model.head = init_head(model.config, root.split("probe_head"));
  model.set_trainable(false, true);
  std::vector<NamedParam> params;
  model.head.collect(params);
  const std::string kind = model.kind.name();
  const std::uint64_t eval_seed = root.split("eval").next_u64();
  const Rng epoch_rng = root.split("probe_epoch");

  const std::size_t steps_per_epoch =
      make_batches(data.train, config.batch_size, config.sampler, epoch_rng.split(std::uint64_t{1}).key()).size();
  const std::size_t total = steps_per_epoch * config.probe_epochs;
  MomentumState state;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.probe_epochs; ++epoch) {
    const BatchPlan plan = make_batches(data.train, config.batch_size, config.sampler, epoch_rng.split(epoch).key());
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& indices : plan) {
      const GroupedBatch batch = gather_batch(data.train, indices, data.image_h, data.image_w, data.channels);
      Tape tape;
      {
        TapeScope scope(tape);
        const ContextForwardOutput out = model.infer(batch);
        const Tensor loss = cross_entropy(out.logits, batch.labels);
        tape.backward(loss);
        loss_sum += loss.item() * static_cast<double>(batch.size());
      }
      sgd_momentum_step(params, state, cosine_annealed(config.probe_lr, step, total), config.probe_momentum);
      zero_grads(params);
      seen += batch.size();
      ++step;
    }
    const double train_loss = loss_sum / static_cast<double>(seen);
    result.epoch_train_loss.push_back(train_loss);
    const auto e = static_cast<long>(epoch);
    result.log.add(e, "probe_train", "loss", train_loss, config.seed, kind);
    if (!data.val.empty()) {
      result.log.add(e, "probe_val", "accuracy",
                     compute_metrics(model, data.val, config.eval_batch_size, eval_seed).accuracy, config.seed, kind);
    }
  }
  return result;
}

}  // namespace ctxvit
