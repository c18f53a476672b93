#include "ctxvit/verify.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "ctxvit/gradcheck.hpp"
#include "ctxvit/ops.hpp"
#include "ctxvit/train.hpp"

namespace ctxvit {

ViTConfig toy_vit_config() {
  ViTConfig c;
  c.image_h = 16;
  c.image_w = 16;
  c.channels = 3;
  c.patch = 4;
  c.dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.num_classes = 4;
  return c;
}

std::vector<std::string> gradient_suite_kinds() {
  return {"none",
          "mean",
          "mean_linear",
          "mean_linear_detach",
          "layerwise_mean",
          "layerwise_mean_linear",
          "layerwise_mean_linear_detach",
          "deep_sets",
          "deep_sets_detach",
          "layerwise_deep_sets",
          "oracle",
          "ema",
          "in_context_patches"};
}

void randomize_parameters(Model& model, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (NamedParam& p : model.parameters()) {
    const bool gain = p.name.size() >= 4 && p.name.compare(p.name.size() - 4, 4, "gain") == 0;
    for (double& v : p.tensor.mutable_data()) v = (gain ? 1.0 : 0.0) + scale * rng.normal();
  }
}

GroupedBatch toy_batch(const ViTConfig& config, std::uint64_t seed) {
  const std::size_t b = 5;
  Rng rng(seed);
  std::vector<double> pixels(b * config.image_h * config.image_w * config.channels);
  for (double& v : pixels) v = rng.uniform();
  std::vector<int> labels;
  for (std::size_t i = 0; i < b; ++i) labels.push_back(static_cast<int>(rng.below(config.num_classes)));
  return make_grouped_batch(Tensor::from({b, config.image_h, config.image_w, config.channels}, std::move(pixels)),
                            std::move(labels), {0, 0, 1, 1, 1});
}

namespace {

// Every checked loss is kept near 1e-3 in magnitude. Central-difference
// roundoff grows like eps * |f| / h, and coordinates whose true gradient is
// exactly zero (key biases, for one) are compared against the 1e-8
// denominator floor, so a unit-scale loss would fail on roundoff alone.
constexpr double kLossScale = 1e-3;

// sum(w * y) with fixed seeded weights, so every output coordinate matters.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  return sum_all(mul(y, randn_seeded(y.shape(), seed, kLossScale)));
}

Tensor param(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
  return randn_seeded(shape, seed, scale, true);
}

struct Case {
  std::string name;
  std::vector<Tensor> params;
  std::function<Tensor()> loss;
};

std::vector<Case> op_cases(std::uint64_t seed) {
  std::vector<Case> cases;
  auto s = [&](std::uint64_t k) { return mix64(seed * 1000 + k); };

  {
    Tensor a = param({3, 4}, s(1)), b = param({3, 4}, s(2));
    cases.push_back({"add", {a, b}, [=] { return probe(add(a, b), s(3)); }});
  }
  {
    Tensor a = param({2, 3, 4}, s(4)), b = param({4}, s(5));
    cases.push_back({"add_broadcast", {a, b}, [=] { return probe(add(a, b), s(6)); }});
  }
  {
    Tensor a = param({3, 4}, s(7)), b = param({3, 4}, s(8));
    cases.push_back({"sub", {a, b}, [=] { return probe(sub(a, b), s(9)); }});
  }
  {
    Tensor a = param({3, 4}, s(10)), b = param({3, 4}, s(11));
    cases.push_back({"mul", {a, b}, [=] { return probe(mul(a, b), s(12)); }});
  }
  {
    Tensor a = param({2, 5}, s(13));
    cases.push_back({"scale", {a}, [=] { return probe(scale(a, -1.7), s(14)); }});
  }
  {
    Tensor a = param({2, 3, 4}, s(15)), b = param({4, 5}, s(16));
    cases.push_back({"matmul", {a, b}, [=] { return probe(matmul(a, b), s(17)); }});
  }
  {
    Tensor a = param({2, 3, 4}, s(18)), b = param({2, 4, 5}, s(19));
    cases.push_back({"bmm", {a, b}, [=] { return probe(bmm(a, b), s(20)); }});
  }
  {
    Tensor a = param({2, 3, 4}, s(21)), b = param({2, 5, 4}, s(22));
    cases.push_back({"bmm_transpose_b", {a, b}, [=] { return probe(bmm(a, b, true), s(23)); }});
  }
  {
    Tensor x = param({3, 5}, s(24), 2.0);
    cases.push_back({"softmax_last", {x}, [=] { return probe(softmax(x, -1), s(25)); }});
    Tensor y = param({4, 3, 2}, s(26), 2.0);
    cases.push_back({"softmax_axis0", {y}, [=] { return probe(softmax(y, 0), s(27)); }});
  }
  {
    Tensor x = param({3, 6}, s(28), 2.0), g = param({6}, s(29)), b = param({6}, s(30));
    cases.push_back({"layer_norm", {x, g, b}, [=] { return probe(layer_norm(x, g, b, 1e-6), s(31)); }});
  }
  {
    Tensor x = param({4, 5}, s(32), 2.0);
    cases.push_back({"gelu", {x}, [=] { return probe(gelu(x), s(33)); }});
  }
  {
    // Keep inputs away from the kink at 0.
    std::vector<double> v;
    Rng rng(s(34));
    for (int i = 0; i < 20; ++i) v.push_back((rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.1 + rng.uniform()));
    Tensor x = Tensor::from({4, 5}, v, true);
    cases.push_back({"relu", {x}, [=] { return probe(relu(x), s(35)); }});
  }
  {
    Tensor x = param({3, 4, 5}, s(36));
    cases.push_back({"mean_axis", {x}, [=] { return probe(mean_axis(x, {0, 2}), s(37)); }});
    cases.push_back({"sum_axis", {x}, [=] { return probe(sum_axis(x, {1}), s(38)); }});
    cases.push_back({"sum_all", {x}, [=] { return mul(sum_all(x), sum_all(x)); }});
    cases.push_back({"mean_all", {x}, [=] { return mul(mean_all(x), mean_all(x)); }});
  }
  {
    // Only the non-detached factor carries gradient.
    Tensor x = param({3, 4}, s(39));
    cases.push_back({"stop_gradient", {x}, [=] { return probe(mul(x, stop_gradient(x)), s(40)); }});
  }
  {
    Tensor x = param({2, 3, 4}, s(41));
    cases.push_back({"reshape", {x}, [=] { return probe(reshape(x, {6, 4}), s(42)); }});
    cases.push_back({"permute", {x}, [=] { return probe(permute(x, {2, 0, 1}), s(43)); }});
    cases.push_back({"slice", {x}, [=] { return probe(slice(x, 1, 1, 2), s(44)); }});
    const std::vector<std::size_t> idx{2, 0, 2, 1};
    cases.push_back({"index_select", {x}, [=] { return probe(index_select(x, 1, idx), s(45)); }});
  }
  {
    Tensor a = param({2, 3, 4}, s(46)), b = param({2, 1, 4}, s(47));
    cases.push_back({"concat", {a, b}, [=] {
                       const Tensor parts[] = {a, b};
                       return probe(concat(parts, 1), s(48));
                     }});
  }
  {
    Tensor z = param({4, 5}, s(49), 2.0);
    const std::vector<int> labels{0, 4, 2, 2};
    cases.push_back({"cross_entropy", {z}, [=] { return scale(cross_entropy(z, labels), kLossScale); }});
  }

  // Model building blocks on the toy configuration.
  const ViTConfig cfg = toy_vit_config();
  Model m = init_model(cfg, ContextKind::parse("deep_sets"), {}, s(50));
  randomize_parameters(m, s(51), 0.3);
  const BackboneParams& bb = m.backbone;
  {
    Tensor images = param({2, cfg.image_h, cfg.image_w, cfg.channels}, s(52));
    cases.push_back({"patchify_batch", {images}, [=] { return probe(patchify_batch(images, cfg.patch), s(53)); }});
    Tensor patches = param({2, cfg.num_patches(), cfg.patch_dim()}, s(54));
    cases.push_back({"embed_and_assemble",
                     {patches, bb.patch_weight, bb.patch_bias, bb.cls_token, bb.pos_embed},
                     [=] { return probe(embed_and_assemble(patches, bb), s(55)); }});
  }
  {
    Tensor x = param({2, 5, cfg.dim}, s(56));
    const LayerParams& l = bb.layers[0];
    cases.push_back({"attention",
                     {x, l.qkv_weight, l.qkv_bias, l.proj_weight, l.proj_bias},
                     [=] { return probe(attention(x, l, cfg.heads), s(57)); }});
    cases.push_back({"transformer_layer",
                     {x, l.norm1_gain, l.norm1_bias, l.qkv_weight, l.qkv_bias, l.proj_weight, l.proj_bias,
                      l.norm2_gain, l.norm2_bias, l.fc1_weight, l.fc1_bias, l.fc2_weight, l.fc2_bias},
                     [=] { return probe(transformer_layer(x, l, cfg), s(58)); }});
    cases.push_back({"cls_readout", {x, bb.norm_gain, bb.norm_bias},
                     [=] { return probe(cls_readout(x, bb, cfg), s(59)); }});
  }
  {
    Tensor members = param({3, 4, cfg.dim}, s(60));
    cases.push_back({"infer_context_mean", {members}, [=] { return probe(infer_context_mean(members), s(61)); }});
    LinearHead head{param({cfg.dim, cfg.dim}, s(62), 0.3), param({cfg.dim}, s(63))};
    Tensor pooled = param({2, cfg.dim}, s(64));
    cases.push_back({"apply_linear_head", {pooled, head.weight, head.bias},
                     [=] { return probe(apply_linear_head(pooled, head, false), s(65)); }});
    cases.push_back({"apply_linear_head_detach", {pooled, head.weight, head.bias},
                     [=] { return probe(apply_linear_head(pooled, head, true), s(66)); }});
    const DeepSetsParams& ds = m.context.deep_sets[0];
    cases.push_back({"deep_sets_infer",
                     {members, ds.phi.hidden1_weight, ds.phi.hidden2_bias, ds.phi.out_weight, ds.rho.hidden1_bias,
                      ds.rho.hidden2_weight, ds.rho.out_weight, ds.rho.out_bias},
                     [=] { return probe(deep_sets_infer(members, ds, false), s(67)); }});
    cases.push_back({"sample_context_patches", {members},
                     [=] { return probe(sample_context_patches(members, 7, s(68)), s(69)); }});
  }
  return cases;
}

GradCheckOutcome run_case(const std::string& name, const std::function<Tensor()>& loss, std::vector<Tensor> params,
                          const GradSuiteOptions& options) {
  GradCheckOutcome out;
  out.name = name;
  const auto start = std::chrono::steady_clock::now();
  try {
    const GradCheckResult r =
        finite_diff_check(loss, params, options.step, options.max_coords_per_param, options.seed);
    out.max_rel_error = r.max_rel_error;
    out.coords = r.coords_checked;
    out.coords_at_kinks = r.coords_at_kinks;
    const double total = static_cast<double>(r.coords_checked + r.coords_at_kinks);
    out.passed = r.max_rel_error < options.tolerance && r.coords_checked > 0 &&
                 static_cast<double>(r.coords_at_kinks) <= options.max_kink_fraction * total;
    char buf[160];
    std::snprintf(buf, sizeof buf, "worst at param %zu index %zu: analytic %.6e numeric %.6e", r.worst_param,
                  r.worst_index, r.worst_analytic, r.worst_numeric);
    out.detail = buf;
  } catch (const std::exception& e) {
    out.passed = false;
    out.detail = e.what();
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace

std::vector<GradCheckOutcome> run_gradient_suite(const GradSuiteOptions& options) {
  std::vector<GradCheckOutcome> results;
  auto emit = [&](GradCheckOutcome r) {
    if (options.on_result) options.on_result(r);
    results.push_back(std::move(r));
  };
  if (options.include_ops) {
    for (Case& c : op_cases(options.seed)) emit(run_case("op/" + c.name, c.loss, c.params, options));
  }
  if (options.include_models) {
    const ViTConfig cfg = toy_vit_config();
    const GroupedBatch batch = toy_batch(cfg, mix64(options.seed + 1));
    const std::vector<GroupId> oracle_groups{0, 1};
    for (const std::string& name : gradient_suite_kinds()) {
      ContextKind kind = ContextKind::parse(name);
      kind.context_patches = 6;
      Model model = init_model(cfg, kind, oracle_groups, options.seed);
      randomize_parameters(model, mix64(options.seed + 2), 0.3);
      std::vector<Tensor> params;
      for (const NamedParam& p : model.parameters()) params.push_back(p.tensor);
      auto loss = [&model, &batch, seed = options.seed] {
        ContextForwardOptions opts;
        opts.sample_seed = mix64(seed + 3);
        const ContextForwardOutput out = model.forward(batch, opts);
        return add(scale(cross_entropy(out.logits, batch.labels), kLossScale),
                   scale(probe(out.embedding, mix64(seed + 4)), 0.1));
      };
      emit(run_case("model/" + name, loss, params, options));
    }
  }
  return results;
}

}  // namespace ctxvit
