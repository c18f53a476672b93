#include "ctxvit/context.hpp"

#include <algorithm>
#include <string>

#include "ctxvit/ops.hpp"

namespace ctxvit {

UnknownContextError::UnknownContextError(GroupId group)
    : std::runtime_error("unknown context: group " + std::to_string(group) +
                         " has no oracle token (oracle contexts exist only for training groups)"),
      group_(group) {}

// ===========================================================================
// ContextKind

namespace {
constexpr std::string_view kLayerwisePrefix = "layerwise_";
}

const std::vector<std::string>& context_kind_vocabulary() {
  static const std::vector<std::string> names = {
      "none",     "mean",             "mean_linear", "mean_linear_detach", "layerwise_mean_linear_detach",
      "deep_sets", "deep_sets_detach", "oracle",      "ema",                "in_context_patches"};
  return names;
}

ContextKind ContextKind::parse(std::string_view name) {
  ContextKind kind;
  std::string_view base = name;
  if (base.starts_with(kLayerwisePrefix)) {
    kind.layerwise = true;
    base.remove_prefix(kLayerwisePrefix.size());
  }
  if (base == "none") {
    kind.method = ContextMethod::none;
  } else if (base == "mean") {
    kind.method = ContextMethod::mean;
  } else if (base == "mean_linear") {
    kind.method = ContextMethod::mean_linear;
  } else if (base == "mean_linear_detach") {
    kind.method = ContextMethod::mean_linear;
    kind.detach = true;
  } else if (base == "deep_sets") {
    kind.method = ContextMethod::deep_sets;
  } else if (base == "deep_sets_detach") {
    kind.method = ContextMethod::deep_sets;
    kind.detach = true;
  } else if (base == "oracle") {
    kind.method = ContextMethod::oracle;
  } else if (base == "ema") {
    kind.method = ContextMethod::ema;
  } else if (base == "in_context_patches") {
    kind.method = ContextMethod::in_context_patches;
  } else {
    std::string known;
    for (const auto& n : context_kind_vocabulary()) known += (known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown context kind '" + std::string(name) + "' (expected one of: " + known + ")");
  }
  kind.validate();
  return kind;
}

std::string ContextKind::name() const {
  std::string base;
  switch (method) {
    case ContextMethod::none: base = "none"; break;
    case ContextMethod::in_context_patches: base = "in_context_patches"; break;
    case ContextMethod::oracle: base = "oracle"; break;
    case ContextMethod::mean: base = "mean"; break;
    case ContextMethod::mean_linear: base = detach ? "mean_linear_detach" : "mean_linear"; break;
    case ContextMethod::deep_sets: base = detach ? "deep_sets_detach" : "deep_sets"; break;
    case ContextMethod::ema: base = "ema"; break;
  }
  return layerwise ? std::string(kLayerwisePrefix) + base : base;
}

void ContextKind::validate() const {
  const bool layerwise_ok = method == ContextMethod::mean || method == ContextMethod::mean_linear ||
                            method == ContextMethod::deep_sets;
  if (layerwise && !layerwise_ok) {
    throw std::invalid_argument("context kind: layerwise conditioning requires an amortized mean or deep-sets kind");
  }
  if (detach && method != ContextMethod::mean_linear && method != ContextMethod::deep_sets) {
    throw std::invalid_argument("context kind: detach applies only to mean_linear and deep_sets");
  }
  if (!(ema_lambda > 0.0 && ema_lambda < 1.0)) {
    throw std::invalid_argument("context kind: ema lambda must lie in (0, 1)");
  }
  if (context_patches == 0) {
    throw std::invalid_argument("context kind: in-context patch count must be at least 1");
  }
}

bool ContextKind::amortized() const {
  return method == ContextMethod::mean || method == ContextMethod::mean_linear ||
         method == ContextMethod::deep_sets || method == ContextMethod::ema;
}

bool ContextKind::uses_linear_heads() const {
  return method == ContextMethod::mean_linear || method == ContextMethod::ema;
}

bool ContextKind::adds_context_slot() const {
  return method != ContextMethod::none && method != ContextMethod::in_context_patches;
}

// ===========================================================================
// Groups

Partition group_partition(std::span<const GroupId> groups) {
  Partition partition;
  std::map<GroupId, std::size_t> slot;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto [it, inserted] = slot.try_emplace(groups[i], partition.size());
    if (inserted) {
      partition.push_back(GroupSlice{groups[i], {}});
    }
    partition[it->second].indices.push_back(i);
  }
  return partition;
}

std::vector<std::size_t> partition_inverse(const Partition& partition, std::size_t batch_size) {
  std::vector<std::size_t> inverse(batch_size, batch_size);
  for (std::size_t g = 0; g < partition.size(); ++g) {
    for (std::size_t i : partition[g].indices) {
      if (i >= batch_size || inverse[i] != batch_size) {
        throw std::invalid_argument("partition: index lists must be disjoint and within the batch");
      }
      inverse[i] = g;
    }
  }
  if (std::find(inverse.begin(), inverse.end(), batch_size) != inverse.end()) {
    throw std::invalid_argument("partition: index lists must cover the whole batch");
  }
  return inverse;
}

GroupedBatch make_grouped_batch(Tensor images, std::vector<int> labels, std::vector<GroupId> groups) {
  if (images.rank() != 4 || images.dim(0) != labels.size() || labels.size() != groups.size()) {
    throw std::invalid_argument("make_grouped_batch: images, labels and groups disagree on batch size");
  }
  GroupedBatch batch;
  batch.partition = group_partition(groups);
  batch.images = std::move(images);
  batch.labels = std::move(labels);
  batch.groups = std::move(groups);
  return batch;
}

// ===========================================================================
// Parameters

void ContextParams::collect(std::vector<NamedParam>& out) const {
  for (std::size_t l = 0; l < linear_heads.size(); ++l) {
    const std::string pre = "context.head" + std::to_string(l) + ".";
    out.push_back({pre + "weight", linear_heads[l].weight, true});
    out.push_back({pre + "bias", linear_heads[l].bias, false});
  }
  for (std::size_t l = 0; l < deep_sets.size(); ++l) {
    const std::string pre = "context.deep_sets" + std::to_string(l) + ".";
    for (const auto& [net, mlp] : {std::pair{"phi.", &deep_sets[l].phi}, std::pair{"rho.", &deep_sets[l].rho}}) {
      out.push_back({pre + net + "hidden1_weight", mlp->hidden1_weight, true});
      out.push_back({pre + net + "hidden1_bias", mlp->hidden1_bias, false});
      out.push_back({pre + net + "hidden2_weight", mlp->hidden2_weight, true});
      out.push_back({pre + net + "hidden2_bias", mlp->hidden2_bias, false});
      out.push_back({pre + net + "out_weight", mlp->out_weight, true});
      out.push_back({pre + net + "out_bias", mlp->out_bias, false});
    }
  }
  for (const auto& [group, token] : oracle_table) {
    out.push_back({"context.oracle." + std::to_string(group), token, false});
  }
}

namespace {

Tensor identity_matrix(std::size_t d) {
  Tensor t = Tensor::zeros({d, d}, true);
  for (std::size_t i = 0; i < d; ++i) t.mutable_data()[i * d + i] = 1.0;
  return t;
}

SetMlp init_set_mlp(std::size_t d, double scale, Rng rng, bool identity_out) {
  SetMlp m;
  m.hidden1_weight = randn_seeded({d, d}, rng.split("hidden1").next_u64(), scale, true);
  m.hidden1_bias = Tensor::zeros({d}, true);
  m.hidden2_weight = randn_seeded({d, d}, rng.split("hidden2").next_u64(), scale, true);
  m.hidden2_bias = Tensor::zeros({d}, true);
  m.out_weight = identity_out ? identity_matrix(d) : Tensor::zeros({d, d}, true);
  m.out_bias = Tensor::zeros({d}, true);
  return m;
}

}  // namespace

ContextParams init_context_params(const ViTConfig& config, const ContextKind& kind,
                                  std::span<const GroupId> oracle_groups, Rng rng) {
  kind.validate();
  const std::size_t d = config.dim;
  ContextParams p;
  if (kind.uses_linear_heads()) {
    for (std::size_t l = 0; l < config.depth; ++l) {
      p.linear_heads.push_back(LinearHead{Tensor::zeros({d, d}, true), Tensor::zeros({d}, true)});
    }
  }
  if (kind.method == ContextMethod::deep_sets) {
    for (std::size_t l = 0; l < config.depth; ++l) {
      Rng layer_rng = rng.split("deep_sets").split(l);
      p.deep_sets.push_back(DeepSetsParams{init_set_mlp(d, config.init_scale, layer_rng.split("phi"), true),
                                           init_set_mlp(d, config.init_scale, layer_rng.split("rho"), false)});
    }
  }
  if (kind.method == ContextMethod::oracle) {
    for (GroupId g : oracle_groups) {
      p.oracle_table.emplace(g, Tensor::zeros({d}, true));
    }
  }
  return p;
}

const std::vector<double>& EmaState::update(GroupId group, std::span<const double> batch_mean) {
  auto it = values.find(group);
  std::optional<std::vector<double>> prior;
  if (it != values.end()) prior = it->second;
  std::vector<double> next = ema_update(prior, batch_mean, lambda);
  auto& slot = values[group];
  slot = std::move(next);
  return slot;
}

// ===========================================================================
// Inference primitives

Tensor infer_context_mean(const Tensor& member_embeds) {
  if (member_embeds.rank() != 3 || member_embeds.dim(0) == 0) {
    throw std::invalid_argument("infer_context_mean: expected a non-empty [M, N, d] member set");
  }
  return mean_axis(member_embeds, {0, 1});
}

Tensor apply_linear_head(const Tensor& pooled, const LinearHead& head, bool detach) {
  const Tensor input = detach ? stop_gradient(pooled) : pooled;
  if (input.rank() == 1) {
    const Tensor row = reshape(input, {1, input.numel()});
    return reshape(add(matmul(row, head.weight), head.bias), {input.numel()});
  }
  return add(matmul(input, head.weight), head.bias);
}

Tensor oracle_lookup(GroupId group, const std::map<GroupId, Tensor>& table) {
  auto it = table.find(group);
  if (it == table.end()) {
    throw UnknownContextError(group);
  }
  return it->second;
}

std::vector<double> ema_update(const std::optional<std::vector<double>>& state, std::span<const double> batch_mean,
                               double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw std::invalid_argument("ema_update: lambda must lie in (0, 1)");
  }
  if (!state) {
    return {batch_mean.begin(), batch_mean.end()};
  }
  if (state->size() != batch_mean.size()) {
    throw std::invalid_argument("ema_update: state and batch mean differ in size");
  }
  std::vector<double> out(batch_mean.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = lambda * (*state)[i] + (1.0 - lambda) * batch_mean[i];
  }
  return out;
}

Tensor set_mlp_forward(const Tensor& x, const SetMlp& mlp) {
  const Tensor h1 = add(x, relu(add(matmul(x, mlp.hidden1_weight), mlp.hidden1_bias)));
  const Tensor h2 = add(h1, relu(add(matmul(h1, mlp.hidden2_weight), mlp.hidden2_bias)));
  return add(matmul(h2, mlp.out_weight), mlp.out_bias);
}

Tensor deep_sets_infer(const Tensor& member_embeds, const DeepSetsParams& params, bool detach) {
  if (member_embeds.rank() != 3 || member_embeds.dim(0) == 0) {
    throw std::invalid_argument("deep_sets_infer: expected a non-empty [M, N, d] member set");
  }
  const std::size_t d = member_embeds.dim(2);
  Tensor rows = reshape(member_embeds, {member_embeds.numel() / d, d});
  if (detach) {
    rows = stop_gradient(rows);
  }
  const Tensor pooled = sum_axis(set_mlp_forward(rows, params.phi), {0});
  return reshape(set_mlp_forward(reshape(pooled, {1, d}), params.rho), {d});
}

Tensor sample_context_patches(const Tensor& member_embeds, std::size_t count, std::uint64_t seed) {
  if (count == 0) {
    throw std::invalid_argument("sample_context_patches: K must be at least 1");
  }
  if (member_embeds.rank() != 3 || member_embeds.numel() == 0) {
    throw std::invalid_argument("sample_context_patches: empty patch pool");
  }
  const std::size_t d = member_embeds.dim(2);
  const std::size_t pool = member_embeds.numel() / d;
  Rng rng(seed);
  std::vector<std::size_t> picks(count);
  for (std::size_t& p : picks) p = rng.below(pool);
  return index_select(reshape(member_embeds, {pool, d}), 0, picks);
}

// ===========================================================================
// Forward

namespace {

struct InferenceInputs {
  const ContextKind& kind;
  const ContextParams& params;
  const ContextForwardOptions& options;
};

Tensor stack_rows(const std::vector<Tensor>& rows) {
  std::vector<Tensor> parts;
  parts.reserve(rows.size());
  for (const Tensor& r : rows) parts.push_back(reshape(r, {1, r.numel()}));
  return concat(parts, 0);
}

// Context tokens for every group of the batch from patch tokens [B, N, d].
Tensor infer_tokens(const Tensor& patch_tokens, const Partition& partition, std::size_t layer,
                    const InferenceInputs& in) {
  const ContextKind& kind = in.kind;
  if (kind.method == ContextMethod::oracle) {
    std::vector<Tensor> rows;
    for (const GroupSlice& g : partition) rows.push_back(oracle_lookup(g.group, in.params.oracle_table));
    return stack_rows(rows);
  }
  if (kind.method == ContextMethod::deep_sets) {
    std::vector<Tensor> rows;
    for (const GroupSlice& g : partition) {
      rows.push_back(deep_sets_infer(index_select(patch_tokens, 0, g.indices), in.params.deep_sets.at(layer),
                                     kind.detach));
    }
    return stack_rows(rows);
  }

  std::vector<Tensor> means;
  for (const GroupSlice& g : partition) {
    means.push_back(infer_context_mean(index_select(patch_tokens, 0, g.indices)));
  }
  Tensor pooled = stack_rows(means);
  if (in.options.freeze_pooled_input) {
    pooled = Tensor::from(pooled.shape(), pooled.values());
  }

  if (kind.method == ContextMethod::ema) {
    const std::size_t d = pooled.dim(1);
    std::vector<double> values(pooled.numel());
    for (std::size_t gi = 0; gi < partition.size(); ++gi) {
      std::span<const double> batch_mean = pooled.data().subspan(gi * d, d);
      std::span<const double> chosen = batch_mean;
      EmaState* ema = in.options.ema;
      if (ema != nullptr && in.options.training) {
        chosen = ema->update(partition[gi].group, batch_mean);
      } else if (ema != nullptr) {
        auto it = ema->values.find(partition[gi].group);
        if (it != ema->values.end()) chosen = it->second;
      }
      std::copy(chosen.begin(), chosen.end(), values.begin() + static_cast<std::ptrdiff_t>(gi * d));
    }
    // The EMA value is held constant within a step.
    const Tensor held = stop_gradient(Tensor::from(pooled.shape(), std::move(values)));
    return apply_linear_head(held, in.params.linear_heads.at(layer), false);
  }
  if (kind.method == ContextMethod::mean_linear) {
    return apply_linear_head(pooled, in.params.linear_heads.at(layer), kind.detach);
  }
  return pooled;
}

Tensor scatter_tokens(const Tensor& tokens, const std::vector<std::size_t>& inverse) {
  const std::size_t d = tokens.dim(1);
  return reshape(index_select(tokens, 0, inverse), {inverse.size(), 1, d});
}

}  // namespace

ContextForwardOutput contextvit_forward(const GroupedBatch& batch, const BackboneParams& backbone,
                                        const ClassifierHead& head, const ContextParams& context,
                                        const ContextKind& kind, const ViTConfig& config,
                                        const ContextForwardOptions& options) {
  kind.validate();
  ContextForwardOutput out;
  if (kind.method == ContextMethod::none) {
    ForwardOutput plain = vit_forward(batch.images, backbone, head, config);
    out.embedding = plain.embedding;
    out.logits = plain.logits;
    out.seq_len = plain.seq_len;
    return out;
  }

  const std::size_t b = batch.size();
  const std::vector<std::size_t> inverse = partition_inverse(batch.partition, b);
  const Tensor patch_tokens = embed_patches(patchify_batch(batch.images, config.patch), backbone);
  const std::size_t n = patch_tokens.dim(1);
  const Tensor positioned = add(patch_tokens, backbone.pos_embed);
  const Tensor cls = broadcast_token(backbone.cls_token, b);
  const InferenceInputs in{kind, context, options};

  Tensor x;
  if (kind.method == ContextMethod::in_context_patches) {
    std::vector<Tensor> samples;
    for (const GroupSlice& g : batch.partition) {
      const std::uint64_t seed = mix64(options.sample_seed ^ mix64(g.group + 0x51ED270B27ULL));
      const Tensor picked = sample_context_patches(index_select(patch_tokens, 0, g.indices), kind.context_patches, seed);
      samples.push_back(reshape(picked, {1, picked.dim(0), picked.dim(1)}));
    }
    const Tensor per_image = index_select(concat(samples, 0), 0, inverse);
    const Tensor parts[] = {cls, positioned, per_image};
    x = concat(parts, 1);
    out.seq_len = x.dim(1);
    for (const LayerParams& layer : backbone.layers) {
      x = transformer_layer(x, layer, config);
    }
  } else {
    Tensor tokens = infer_tokens(patch_tokens, batch.partition, 0, in);
    out.context_tokens.push_back(tokens);
    const Tensor parts[] = {cls, scatter_tokens(tokens, inverse), positioned};
    x = concat(parts, 1);
    out.seq_len = x.dim(1);
    for (std::size_t l = 0; l < backbone.layers.size(); ++l) {
      x = transformer_layer(x, backbone.layers[l], config);
      if (kind.layerwise && l + 1 < backbone.layers.size()) {
        // Overwrite the context slot with a token re-inferred from this
        // layer's hidden patch tokens.
        const Tensor hidden = slice(x, 1, 2, n);
        tokens = infer_tokens(hidden, batch.partition, l + 1, in);
        out.context_tokens.push_back(tokens);
        const Tensor next[] = {slice(x, 1, 0, 1), scatter_tokens(tokens, inverse), hidden};
        x = concat(next, 1);
      }
    }
  }
  out.embedding = cls_readout(x, backbone, config);
  out.logits = classify(out.embedding, head);
  return out;
}

}  // namespace ctxvit
