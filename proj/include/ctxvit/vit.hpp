#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ctxvit/ops.hpp"
#include "ctxvit/rng.hpp"
#include "ctxvit/tensor.hpp"

namespace ctxvit {

struct ViTConfig {
  std::size_t image_h = 16;
  std::size_t image_w = 16;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 8;
  double init_scale = 0.02;
  double norm_eps = 1e-6;
  Activation ffn_activation = Activation::gelu;

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  std::size_t num_patches() const { return (image_h / patch) * (image_w / patch); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t hidden_dim() const;
  std::size_t head_dim() const { return dim / heads; }
};

// Trainable tensor with the name it is checkpointed under and whether
// decoupled weight decay applies to it.
struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

struct LayerParams {
  Tensor norm1_gain, norm1_bias;
  Tensor qkv_weight, qkv_bias;  // [d, 3d], [3d]
  Tensor proj_weight, proj_bias;
  Tensor norm2_gain, norm2_bias;
  Tensor fc1_weight, fc1_bias;  // [d, hidden]
  Tensor fc2_weight, fc2_bias;  // [hidden, d]
};

struct BackboneParams {
  Tensor patch_weight;  // [patch*patch*channels, d]
  Tensor patch_bias;    // [d]
  Tensor cls_token;     // [1, d]
  Tensor pos_embed;     // [N, d]
  std::vector<LayerParams> layers;
  Tensor norm_gain, norm_bias;

  void collect(std::vector<NamedParam>& out) const;
};

struct ClassifierHead {
  Tensor weight;  // [d, num_classes]
  Tensor bias;    // [num_classes]

  void collect(std::vector<NamedParam>& out, const std::string& prefix = "head") const;
};

BackboneParams init_backbone(const ViTConfig& config, Rng rng);
ClassifierHead init_head(const ViTConfig& config, Rng rng);
// Zeroes every attention and feed-forward weight and bias in place.
void zero_residual_branches(BackboneParams& params);

// image laid out [H, W, C] row-major -> [N, patch*patch*C]; row i is the
// i-th patch in row-major grid order, flattened as (row, col, channel).
Tensor patchify(std::span<const double> image, std::size_t height, std::size_t width, std::size_t channels,
                std::size_t patch);
// images [B, H, W, C] -> [B, N, patch*patch*C]
Tensor patchify_batch(const Tensor& images, std::size_t patch);

// Linear patch projection without positional terms: [B, N, P] -> [B, N, d].
Tensor embed_patches(const Tensor& patches, const BackboneParams& params);
// [cls, t_1 + pos_1, ..., t_N + pos_N] for each image: [B, N + 1, d].
Tensor embed_and_assemble(const Tensor& patches, const BackboneParams& params);
// Repeats a [1, d] (or [d]) token into [B, 1, d].
Tensor broadcast_token(const Tensor& token, std::size_t batch);

// Multi-head scaled dot-product self-attention with output projection on
// x [B, S, d]. When `weights` is non-null it receives the attention
// probabilities [B * heads, S, S].
Tensor attention(const Tensor& x, const LayerParams& layer, std::size_t heads, Tensor* weights = nullptr);
// Pre-norm block: x + attn(norm(x)), then + ffn(norm(.)).
Tensor transformer_layer(const Tensor& x, const LayerParams& layer, const ViTConfig& config);
// Final norm followed by the CLS read-out: [B, S, d] -> [B, d].
Tensor cls_readout(const Tensor& x, const BackboneParams& params, const ViTConfig& config);
Tensor classify(const Tensor& embedding, const ClassifierHead& head);

struct ForwardOutput {
  Tensor embedding;  // [B, d]
  Tensor logits;     // [B, num_classes]
  std::size_t seq_len = 0;
};

ForwardOutput vit_forward(const Tensor& images, const BackboneParams& params, const ClassifierHead& head,
                          const ViTConfig& config);

}  // namespace ctxvit
