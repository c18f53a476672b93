#include <doctest.h>

#include "ctxvit/context.hpp"
#include "ctxvit/model.hpp"
#include "ctxvit/train.hpp"
#include "ctxvit/verify.hpp"

using namespace ctxvit;

namespace {

std::vector<double> row(const Tensor& t, std::size_t i) {
  const std::size_t d = t.dim(t.rank() - 1);
  return {t.data().begin() + static_cast<std::ptrdiff_t>(i * d), t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

}  // namespace

TEST_CASE("kind vocabulary") {
  for (const std::string& name : context_kind_vocabulary()) {
    const ContextKind k = ContextKind::parse(name);
    CHECK(k.name() == name);
    CHECK_NOTHROW(k.validate());
  }
  CHECK(ContextKind::parse("layerwise_mean_linear_detach").layerwise);
  CHECK(ContextKind::parse("mean_linear_detach").detach);
  CHECK_THROWS(ContextKind::parse("median"));
  CHECK_THROWS(ContextKind::parse("layerwise_oracle"));
  CHECK_THROWS(ContextKind::parse("layerwise_in_context_patches"));
  CHECK(ContextKind::parse("in_context_patches").context_patches == 256);
  CHECK(ContextKind::parse("ema").ema_lambda == 0.99);
  CHECK(ContextKind::parse("mean").amortized());
  CHECK_FALSE(ContextKind::parse("oracle").amortized());
}

TEST_CASE("group_partition") {
  const std::vector<GroupId> g{7, 7, 3};
  const Partition p = group_partition(g);
  REQUIRE(p.size() == 2);
  CHECK(p[0].group == 7);
  CHECK(p[0].indices == std::vector<std::size_t>{0, 1});
  CHECK(p[1].group == 3);
  CHECK(p[1].indices == std::vector<std::size_t>{2});
  CHECK(group_partition(std::vector<GroupId>{}).empty());
  const Partition singles = group_partition(std::vector<GroupId>{4, 1, 9});
  CHECK(singles.size() == 3);
  for (const GroupSlice& s : singles) CHECK(s.indices.size() == 1);
  CHECK(partition_inverse(p, 3) == std::vector<std::size_t>{0, 0, 1});
  CHECK_THROWS(partition_inverse(Partition{{1, {0, 1}}, {2, {1}}}, 2));
  CHECK_THROWS(partition_inverse(Partition{{1, {0}}}, 2));
}

TEST_CASE("infer_context_mean") {
  const Tensor members = Tensor::from({2, 1, 2}, {1, 2, 3, 4});
  CHECK(infer_context_mean(members).values() == std::vector<double>{2, 3});
  const Tensor one = Tensor::from({1, 2, 2}, {1, 2, 3, 6});
  CHECK(infer_context_mean(one).values() == std::vector<double>{2, 4});
  CHECK_THROWS(infer_context_mean(Tensor::zeros({0, 2, 2})));

  const Tensor x = randn_seeded({3, 4, 5}, 1, 1.0);
  const std::vector<std::size_t> members_perm{2, 0, 1}, patch_perm{3, 1, 0, 2};
  const Tensor permuted = index_select(index_select(x, 0, members_perm), 1, patch_perm);
  const Tensor a = infer_context_mean(x), b = infer_context_mean(permuted);
  for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(a.data()[j] - b.data()[j]) <= 1e-12);
}

TEST_CASE("apply_linear_head") {
  const std::size_t d = 3;
  const Tensor pooled = Tensor::from({d}, {1, -2, 3});
  LinearHead id{Tensor::zeros({d, d}), Tensor::zeros({d})};
  for (std::size_t i = 0; i < d; ++i) id.weight.mutable_data()[i * d + i] = 1.0;
  CHECK(apply_linear_head(pooled, id, false).values() == pooled.values());
  LinearHead constant{Tensor::zeros({d, d}), Tensor::from({d}, {4, 5, 6})};
  CHECK(apply_linear_head(pooled, constant, true).values() == std::vector<double>{4, 5, 6});

  // Loss depending only on the context token: detach leaves the patch
  // projection without gradient.
  const ViTConfig cfg = toy_vit_config();
  for (bool detach : {true, false}) {
    Model m = init_model(cfg, ContextKind::parse("mean_linear"), {}, 3);
    randomize_parameters(m, 4, 0.3);
    const GroupedBatch batch = toy_batch(cfg, 5);
    Tape tape;
    {
      TapeScope scope(tape);
      const Tensor patches = embed_patches(patchify_batch(batch.images, cfg.patch), m.backbone);
      const Tensor t = apply_linear_head(infer_context_mean(patches), m.context.linear_heads[0], detach);
      tape.backward(sum_all(mul(t, t)));
    }
    bool any_nonzero = false;
    for (double g : m.backbone.patch_weight.grad()) any_nonzero = any_nonzero || g != 0.0;
    CHECK(any_nonzero == !detach);
  }
}

TEST_CASE("oracle_lookup") {
  std::map<GroupId, Tensor> table;
  table.emplace(3, Tensor::from({2}, {0.5, -1.0}, true));
  CHECK(oracle_lookup(3, table).values() == std::vector<double>{0.5, -1.0});
  CHECK_THROWS_AS(oracle_lookup(4, table), UnknownContextError);

  // A loss increasing in t[0] lowers the stored component after one step.
  Tensor token = table.at(3);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum_all(slice(oracle_lookup(3, table), 0, 0, 1)));
  }
  MomentumState state;
  const NamedParam p{"context.oracle.3", token, false};
  sgd_momentum_step(std::span<const NamedParam>(&p, 1), state, 0.1, 0.0);
  CHECK(token.data()[0] < 0.5);
  CHECK(token.data()[1] == -1.0);
}

TEST_CASE("ema_update") {
  CHECK(ema_update(std::vector<double>{0}, std::vector<double>{2}, 0.5) == std::vector<double>{1});
  CHECK(ema_update(std::nullopt, std::vector<double>{2, 3}, 0.9) == std::vector<double>{2, 3});
  CHECK_THROWS(ema_update(std::nullopt, std::vector<double>{1}, 1.0));
  CHECK_THROWS(ema_update(std::nullopt, std::vector<double>{1}, 0.0));
  std::optional<std::vector<double>> s = std::vector<double>{0};
  double gap = 4.0;
  for (int i = 0; i < 10; ++i) {
    s = ema_update(s, std::vector<double>{4}, 0.5);
    const double next = std::abs((*s)[0] - 4.0);
    CHECK(next == doctest::Approx(gap / 2));
    gap = next;
  }
}

TEST_CASE("deep_sets_infer") {
  const ViTConfig cfg = toy_vit_config();
  const ContextParams fresh = init_context_params(cfg, ContextKind::parse("deep_sets"), {}, Rng(1));
  const Tensor x = randn_seeded({2, 3, cfg.dim}, 2, 1.0);
  // Zero-initialized rho output layer gives the zero vector.
  CHECK(deep_sets_infer(x, fresh.deep_sets[0], false).values() == std::vector<double>(cfg.dim, 0.0));

  Model m = init_model(cfg, ContextKind::parse("deep_sets"), {}, 3);
  randomize_parameters(m, 4, 0.3);
  const DeepSetsParams& ds = m.context.deep_sets[0];
  const std::vector<std::size_t> perm{1, 0}, patch_perm{2, 0, 1};
  const Tensor a = deep_sets_infer(x, ds, false);
  const Tensor b = deep_sets_infer(index_select(index_select(x, 0, perm), 1, patch_perm), ds, false);
  for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(std::abs(a.data()[j] - b.data()[j]) <= 1e-12);

  // Duplicating every patch doubles the pooled sum fed to rho.
  const Tensor rows = reshape(x, {6, cfg.dim});
  const Tensor twice_parts[] = {rows, rows};
  const Tensor pooled = sum_axis(set_mlp_forward(rows, ds.phi), {0});
  const Tensor pooled2 = sum_axis(set_mlp_forward(concat(twice_parts, 0), ds.phi), {0});
  for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(pooled2.data()[j] == doctest::Approx(2 * pooled.data()[j]).epsilon(1e-12));
  CHECK_THROWS(deep_sets_infer(Tensor::zeros({0, 3, cfg.dim}), ds, false));
}

TEST_CASE("sample_context_patches") {
  const Tensor one = Tensor::from({1, 1, 2}, {5, 6});
  CHECK(sample_context_patches(one, 3, 9).values() == std::vector<double>{5, 6, 5, 6, 5, 6});
  const Tensor pool = randn_seeded({2, 4, 3}, 1, 1.0);
  CHECK(sample_context_patches(pool, 7, 11).values() == sample_context_patches(pool, 7, 11).values());
  CHECK(sample_context_patches(pool, 7, 11).shape() == Shape{7, 3});
  CHECK_THROWS(sample_context_patches(pool, 0, 1));
  CHECK_THROWS(sample_context_patches(Tensor::zeros({0, 4, 3}), 2, 1));
}

TEST_CASE("contextvit forward layout") {
  const ViTConfig cfg = toy_vit_config();
  const GroupedBatch batch = toy_batch(cfg, 7);
  const std::vector<GroupId> known{0, 1};
  for (const std::string& name : gradient_suite_kinds()) {
    ContextKind kind = ContextKind::parse(name);
    kind.context_patches = 5;
    Model m = init_model(cfg, kind, known, 1);
    randomize_parameters(m, 2, 0.3);
    const ContextForwardOutput out = m.forward(batch);
    CAPTURE(name);
    CHECK(out.logits.shape() == Shape{5, cfg.num_classes});
    if (kind.method == ContextMethod::none) CHECK(out.seq_len == cfg.num_patches() + 1);
    else if (kind.method == ContextMethod::in_context_patches) CHECK(out.seq_len == cfg.num_patches() + 1 + 5);
    else CHECK(out.seq_len == cfg.num_patches() + 2);
    if (kind.adds_context_slot()) {
      CHECK(out.context_tokens.size() == (kind.layerwise ? cfg.depth : 1));
      CHECK(out.context_tokens[0].shape() == Shape{2, cfg.dim});
      if (kind.method != ContextMethod::oracle) CHECK(row(out.context_tokens[0], 0) != row(out.context_tokens[0], 1));
    }
  }
}

TEST_CASE("kind none matches the plain vit bitwise") {
  const ViTConfig cfg = toy_vit_config();
  Model m = init_model(cfg, ContextKind::parse("none"), {}, 3);
  randomize_parameters(m, 4, 0.3);
  const GroupedBatch batch = toy_batch(cfg, 8);
  const ForwardOutput plain = vit_forward(batch.images, m.backbone, m.head, cfg);
  CHECK(m.forward(batch).logits.values() == plain.logits.values());
}

TEST_CASE("oracle kind rejects unseen groups, amortized kinds do not") {
  const ViTConfig cfg = toy_vit_config();
  GroupedBatch batch = toy_batch(cfg, 9);
  batch = make_grouped_batch(batch.images, batch.labels, {0, 0, 5, 5, 5});
  Model oracle = init_model(cfg, ContextKind::parse("oracle"), std::vector<GroupId>{0, 1}, 1);
  CHECK_THROWS_AS(oracle.forward(batch), UnknownContextError);
  for (const char* name : {"mean", "mean_linear_detach", "deep_sets", "ema", "layerwise_mean_linear_detach"}) {
    Model m = init_model(cfg, ContextKind::parse(name), {}, 1);
    CHECK_NOTHROW(m.forward(batch));
  }
}

TEST_CASE("ema state advances only in training") {
  const ViTConfig cfg = toy_vit_config();
  Model m = init_model(cfg, ContextKind::parse("ema"), {}, 1);
  const GroupedBatch batch = toy_batch(cfg, 10);
  m.forward(batch);
  CHECK(m.ema.values.empty());
  ContextForwardOptions train;
  train.training = true;
  m.forward(batch, train);
  CHECK(m.ema.values.size() == 2);
  const auto first = m.ema.values;
  m.infer(batch);
  CHECK(m.ema.values == first);
}

TEST_CASE("layerwise parameter isolation") {
  const ViTConfig cfg = toy_vit_config();
  Model m = init_model(cfg, ContextKind::parse("mean_linear_detach"), {}, 1);
  randomize_parameters(m, 2, 0.3);
  const GroupedBatch batch = toy_batch(cfg, 11);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(cross_entropy(m.forward(batch).logits, batch.labels));
  }
  for (std::size_t l = 1; l < cfg.depth; ++l) {
    for (double g : m.context.linear_heads[l].weight.grad()) CHECK(g == 0.0);
    for (double g : m.context.linear_heads[l].bias.grad()) CHECK(g == 0.0);
  }
  bool head0 = false;
  for (double g : m.context.linear_heads[0].weight.grad()) head0 = head0 || g != 0.0;
  CHECK(head0);
}
