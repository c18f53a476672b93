#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ctxvit/gradcheck.hpp"
#include "ctxvit/train.hpp"

using namespace ctxvit;

namespace {

// Independent restatement of the schedule, in closed form per step.
double expected_lr(std::size_t step, std::size_t warm, std::size_t total, double base, double final_lr) {
  if (step < warm) return base * double(step) / double(warm);
  const double t = double(step - warm) / double(total - 1 - warm);
  return final_lr + 0.5 * (base - final_lr) * (1 + std::cos(std::numbers::pi * t));
}

DatasetSplit tiny_data() {
  SyntheticShiftSpec spec;
  spec.num_classes = 4;
  spec.train_groups = 2;
  spec.ood_groups = 1;
  spec.images_per_group = 48;
  return generate_dataset(spec, 3);
}

ViTConfig tiny_vit(const DatasetSplit& d) {
  ViTConfig c;
  c.image_h = d.image_h;
  c.image_w = d.image_w;
  c.channels = d.channels;
  c.num_classes = d.num_classes;
  c.dim = 8;
  c.depth = 1;
  c.heads = 2;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 3;
  t.warmup_epochs = 1;
  t.batch_size = 16;
  t.probe_epochs = 2;
  t.seed = 4;
  return t;
}

}  // namespace

TEST_CASE("schedule endpoints and shape") {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.warmup_epochs = 2;
  const std::size_t spe = 10, total = 300, warm = 20;
  const Schedule s(cfg, spe);
  CHECK(s.total_steps() == total);
  CHECK(s.warmup_steps() == warm);
  CHECK(std::abs(s.at(0).lr) <= 1e-12);
  CHECK(std::abs(s.at(warm).lr - cfg.base_lr) <= 1e-12);
  CHECK(std::abs(s.at(total - 1).lr - cfg.final_lr) <= 1e-12);
  CHECK(std::abs(s.at(0).weight_decay - cfg.weight_decay_start) <= 1e-12);
  CHECK(std::abs(s.at(total - 1).weight_decay - cfg.weight_decay_end) <= 1e-12);
  for (std::size_t step = 0; step < total; ++step) {
    CHECK(s.at(step).lr == doctest::Approx(expected_lr(step, warm, total, cfg.base_lr, cfg.final_lr)).epsilon(1e-12));
    if (step > 0 && step < warm) CHECK(s.at(step).lr > s.at(step - 1).lr);
    if (step > warm) CHECK(s.at(step).lr <= s.at(step - 1).lr);
    if (step > 0) CHECK(s.at(step).weight_decay >= s.at(step - 1).weight_decay);
  }
  CHECK(schedules(37, cfg, spe).lr == s.at(37).lr);
  CHECK_THROWS(Schedule(cfg, 0));
  CHECK(cosine_annealed(0.5, 0, 11) == 0.5);
  CHECK(std::abs(cosine_annealed(0.5, 10, 11)) <= 1e-15);
  CHECK(cosine_annealed(0.5, 5, 11) == doctest::Approx(0.25));
}

TEST_CASE("train config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.warmup_epochs = t.epochs;
  CHECK_THROWS(t.validate());
  t = {};
  t.base_lr = 0;
  CHECK_THROWS(t.validate());
  t = {};
  t.probe_momentum = 1.0;
  CHECK_THROWS(t.validate());
}

TEST_CASE("cross entropy") {
  const Tensor uniform = Tensor::zeros({2, 4});
  const std::vector<int> labels{1, 3};
  CHECK(cross_entropy(uniform, labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  const Tensor sure = Tensor::from({1, 2}, {50, -50});
  CHECK(cross_entropy(sure, 0).item() < 1e-40 + 1e-43);
  CHECK(cross_entropy(sure, 1).item() == doctest::Approx(100.0));
  CHECK_THROWS(cross_entropy(uniform, std::vector<int>{0, 4}));
  CHECK_THROWS(cross_entropy(uniform, std::vector<int>{0}));

  Tensor logits = randn_seeded({3, 5}, 2, 2.0, true);
  const std::vector<int> y{0, 4, 2};
  Tensor params[] = {logits};
  const GradCheckResult r = finite_diff_check([&] { return cross_entropy(logits, y); }, params, 1e-5);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("adamw step") {
  Tensor w = Tensor::from({3}, {1, -2, 3}, true);
  Tensor b = Tensor::from({3}, {1, -2, 3}, true);
  const std::vector<NamedParam> params{{"w", w, true}, {"b", b, false}};
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum_all(add(scale(w, 2.0), scale(b, -3.0))));
  }
  OptimState state;
  adamw_step(params, state, 0.1, 0.5);
  CHECK(state.step == 1);
  // First bias-corrected step moves each coordinate by lr * sign(g), plus
  // lr * wd * p for the decayed tensor.
  CHECK(w.data()[0] == doctest::Approx(1 - 0.1 - 0.05).epsilon(1e-6));
  CHECK(w.data()[1] == doctest::Approx(-2 - 0.1 + 0.1).epsilon(1e-6));
  CHECK(b.data()[0] == doctest::Approx(1 + 0.1).epsilon(1e-6));
  CHECK(b.data()[2] == doctest::Approx(3 + 0.1).epsilon(1e-6));

  w.zero_grad();
  w.node()->grad_buffer()[1] = std::nan("");
  CHECK_THROWS_WITH_AS(adamw_step(params, state, 0.1, 0.0), doctest::Contains("w"), NonFiniteGradient);
}

TEST_CASE("sgd momentum step") {
  Tensor w = Tensor::from({1}, {1.0}, true);
  const std::vector<NamedParam> params{{"w", w, true}};
  MomentumState state;
  for (int i = 0; i < 2; ++i) {
    w.zero_grad();
    w.node()->grad_buffer()[0] = 1.0;
    sgd_momentum_step(params, state, 0.1, 0.9);
  }
  // v1 = 1, v2 = 1.9; w = 1 - 0.1 - 0.19
  CHECK(w.data()[0] == doctest::Approx(0.71).epsilon(1e-12));
}

TEST_CASE("metrics csv") {
  MetricsLog log;
  log.add(0, "train", "loss", 0.1, 2, "mean");
  log.add(1, "val", "accuracy", 1.0 / 3.0, 2, "mean");
  CHECK(log.to_csv() ==
        "epoch,split,metric,value,seed,kind\n0,train,loss,0.10000000000000001,2,mean\n"
        "1,val,accuracy,0.33333333333333331,2,mean\n");
  CHECK(log.to_csv(false).rfind("0,train", 0) == 0);
}

TEST_CASE("fine_tune learns, is reproducible and probe freezes the backbone") {
  const DatasetSplit d = tiny_data();
  const TrainConfig t = tiny_train();
  const ViTConfig v = tiny_vit(d);
  const Model m0 = init_model(v, ContextKind::parse("mean_linear_detach"), {}, 1);
  const TrainResult a = fine_tune(m0.clone(), d, t);
  const TrainResult b = fine_tune(m0.clone(), d, t);
  REQUIRE(a.epoch_train_loss.size() == 3);
  CHECK(a.epoch_train_loss.back() < a.epoch_train_loss.front());
  CHECK(a.log.to_csv() == b.log.to_csv());
  CHECK(a.best_epoch < 3);

  const ProbeResult p = linear_probe(a.model, d, t);
  CHECK(p.epoch_train_loss.size() == 2);
  CHECK(p.model.backbone.patch_weight.values() == a.model.backbone.patch_weight.values());
  CHECK(p.model.context.linear_heads[0].weight.values() == a.model.context.linear_heads[0].weight.values());
  CHECK(p.model.head.weight.values() != a.model.head.weight.values());
}

TEST_CASE("divergence is reported with kind and seed") {
  const DatasetSplit d = tiny_data();
  TrainConfig t = tiny_train();
  t.base_lr = 1e200;
  const Model m0 = init_model(tiny_vit(d), ContextKind::parse("mean"), {}, 1);
  CHECK_THROWS_WITH_AS(fine_tune(m0.clone(), d, t), doctest::Contains("kind mean, seed 4, epoch"), TrainingDiverged);
}
