#include "ctxvit/model.hpp"

namespace ctxvit {

std::vector<NamedParam> Model::parameters() const {
  std::vector<NamedParam> out = backbone_and_context_parameters();
  head.collect(out);
  return out;
}

std::vector<NamedParam> Model::backbone_and_context_parameters() const {
  std::vector<NamedParam> out;
  backbone.collect(out);
  context.collect(out);
  return out;
}

void Model::set_trainable(bool backbone_and_context, bool head_trainable) {
  for (NamedParam& p : backbone_and_context_parameters()) p.tensor.set_requires_grad(backbone_and_context);
  std::vector<NamedParam> h;
  head.collect(h);
  for (NamedParam& p : h) p.tensor.set_requires_grad(head_trainable);
}

ContextForwardOutput Model::forward(const GroupedBatch& batch, const ContextForwardOptions& options) {
  ContextForwardOptions opts = options;
  if (opts.ema == nullptr && kind.method == ContextMethod::ema) {
    opts.ema = &ema;
  }
  return contextvit_forward(batch, backbone, head, context, kind, config, opts);
}

ContextForwardOutput Model::infer(const GroupedBatch& batch) const {
  ContextForwardOptions opts;
  opts.training = false;
  if (kind.method == ContextMethod::ema) opts.ema = const_cast<EmaState*>(&ema);
  return contextvit_forward(batch, backbone, head, context, kind, config, opts);
}

namespace {

Tensor copy_of(const Tensor& t) { return t.clone(t.requires_grad()); }

SetMlp copy_of(const SetMlp& m) {
  return SetMlp{copy_of(m.hidden1_weight), copy_of(m.hidden1_bias), copy_of(m.hidden2_weight),
                copy_of(m.hidden2_bias),   copy_of(m.out_weight),   copy_of(m.out_bias)};
}

}  // namespace

Model Model::clone() const {
  Model m;
  m.config = config;
  m.kind = kind;
  m.ema = ema;
  const BackboneParams& b = backbone;
  m.backbone.patch_weight = copy_of(b.patch_weight);
  m.backbone.patch_bias = copy_of(b.patch_bias);
  m.backbone.cls_token = copy_of(b.cls_token);
  m.backbone.pos_embed = copy_of(b.pos_embed);
  for (const LayerParams& l : b.layers) {
    m.backbone.layers.push_back(LayerParams{copy_of(l.norm1_gain), copy_of(l.norm1_bias), copy_of(l.qkv_weight),
                                            copy_of(l.qkv_bias), copy_of(l.proj_weight), copy_of(l.proj_bias),
                                            copy_of(l.norm2_gain), copy_of(l.norm2_bias), copy_of(l.fc1_weight),
                                            copy_of(l.fc1_bias), copy_of(l.fc2_weight), copy_of(l.fc2_bias)});
  }
  m.backbone.norm_gain = copy_of(b.norm_gain);
  m.backbone.norm_bias = copy_of(b.norm_bias);
  m.head = ClassifierHead{copy_of(head.weight), copy_of(head.bias)};
  for (const LinearHead& h : context.linear_heads) {
    m.context.linear_heads.push_back(LinearHead{copy_of(h.weight), copy_of(h.bias)});
  }
  for (const DeepSetsParams& ds : context.deep_sets) {
    m.context.deep_sets.push_back(DeepSetsParams{copy_of(ds.phi), copy_of(ds.rho)});
  }
  for (const auto& [g, t] : context.oracle_table) {
    m.context.oracle_table.emplace(g, copy_of(t));
  }
  return m;
}

Model init_model(const ViTConfig& config, const ContextKind& kind, std::span<const GroupId> oracle_groups,
                 std::uint64_t seed) {
  config.validate();
  kind.validate();
  const Rng root(seed);
  Model m;
  m.config = config;
  m.kind = kind;
  m.backbone = init_backbone(config, root.split("backbone"));
  m.head = init_head(config, root.split("head"));
  m.context = init_context_params(config, kind, oracle_groups, root.split("context"));
  m.ema.lambda = kind.ema_lambda;
  return m;
}

}  // namespace ctxvit
