#include "ctxvit/vit.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ctxvit {

void ViTConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("ViTConfig: " + msg); };
  if (image_h == 0 || image_w == 0 || channels == 0 || patch == 0) fail("dimensions must be positive");
  if (image_h % patch != 0 || image_w % patch != 0) {
    fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) + " not divisible by patch " +
         std::to_string(patch));
  }
  if (dim == 0 || heads == 0 || dim % heads != 0) fail("dim must be a positive multiple of heads");
  if (depth == 0) fail("depth must be positive");
  if (!(mlp_ratio > 0.0)) fail("mlp_ratio must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (!(init_scale > 0.0)) fail("init_scale must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
}

std::size_t ViTConfig::hidden_dim() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim)));
}

void BackboneParams::collect(std::vector<NamedParam>& out) const {
  out.push_back({"backbone.patch_weight", patch_weight, true});
  out.push_back({"backbone.patch_bias", patch_bias, false});
  out.push_back({"backbone.cls_token", cls_token, false});
  out.push_back({"backbone.pos_embed", pos_embed, true});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerParams& p = layers[l];
    const std::string pre = "backbone.layer" + std::to_string(l) + ".";
    out.push_back({pre + "norm1_gain", p.norm1_gain, false});
    out.push_back({pre + "norm1_bias", p.norm1_bias, false});
    out.push_back({pre + "qkv_weight", p.qkv_weight, true});
    out.push_back({pre + "qkv_bias", p.qkv_bias, false});
    out.push_back({pre + "proj_weight", p.proj_weight, true});
    out.push_back({pre + "proj_bias", p.proj_bias, false});
    out.push_back({pre + "norm2_gain", p.norm2_gain, false});
    out.push_back({pre + "norm2_bias", p.norm2_bias, false});
    out.push_back({pre + "fc1_weight", p.fc1_weight, true});
    out.push_back({pre + "fc1_bias", p.fc1_bias, false});
    out.push_back({pre + "fc2_weight", p.fc2_weight, true});
    out.push_back({pre + "fc2_bias", p.fc2_bias, false});
  }
  out.push_back({"backbone.norm_gain", norm_gain, false});
  out.push_back({"backbone.norm_bias", norm_bias, false});
}

void ClassifierHead::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  out.push_back({prefix + ".bias", bias, false});
}

BackboneParams init_backbone(const ViTConfig& config, Rng rng) {
  config.validate();
  const std::size_t d = config.dim;
  const std::size_t hidden = config.hidden_dim();
  const double s = config.init_scale;
  std::uint64_t stream = 0;
  auto weight = [&](Shape shape) { return randn_seeded(shape, rng.split(stream++).next_u64(), s, true); };
  auto zeros = [](Shape shape) { return Tensor::zeros(std::move(shape), true); };
  auto ones = [](Shape shape) { return Tensor::full(std::move(shape), 1.0, true); };

  BackboneParams p;
  p.patch_weight = weight({config.patch_dim(), d});
  p.patch_bias = zeros({d});
  p.cls_token = weight({1, d});
  p.pos_embed = zeros({config.num_patches(), d});
  for (std::size_t l = 0; l < config.depth; ++l) {
    LayerParams layer;
    layer.norm1_gain = ones({d});
    layer.norm1_bias = zeros({d});
    layer.qkv_weight = weight({d, 3 * d});
    layer.qkv_bias = zeros({3 * d});
    layer.proj_weight = weight({d, d});
    layer.proj_bias = zeros({d});
    layer.norm2_gain = ones({d});
    layer.norm2_bias = zeros({d});
    layer.fc1_weight = weight({d, hidden});
    layer.fc1_bias = zeros({hidden});
    layer.fc2_weight = weight({hidden, d});
    layer.fc2_bias = zeros({d});
    p.layers.push_back(std::move(layer));
  }
  p.norm_gain = ones({d});
  p.norm_bias = zeros({d});
  return p;
}

ClassifierHead init_head(const ViTConfig& config, Rng rng) {
  ClassifierHead h;
  h.weight = randn_seeded({config.dim, config.num_classes}, rng.next_u64(), config.init_scale, true);
  h.bias = Tensor::zeros({config.num_classes}, true);
  return h;
}

void zero_residual_branches(BackboneParams& params) {
  for (LayerParams& l : params.layers) {
    for (Tensor* t : {&l.qkv_weight, &l.qkv_bias, &l.proj_weight, &l.proj_bias, &l.fc1_weight, &l.fc1_bias,
                      &l.fc2_weight, &l.fc2_bias}) {
      for (double& v : t->mutable_data()) v = 0.0;
    }
  }
}

Tensor patchify(std::span<const double> image, std::size_t height, std::size_t width, std::size_t channels,
                std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("patchify: image " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by patch " + std::to_string(patch));
  }
  if (image.size() != height * width * channels) {
    throw std::invalid_argument("patchify: image buffer has wrong size");
  }
  const std::size_t gh = height / patch, gw = width / patch;
  const std::size_t pdim = patch * patch * channels;
  std::vector<double> out(gh * gw * pdim);
  std::size_t row = 0;
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px, ++row) {
      double* dst = out.data() + row * pdim;
      for (std::size_t y = 0; y < patch; ++y) {
        const double* src = image.data() + ((py * patch + y) * width + px * patch) * channels;
        std::copy(src, src + patch * channels, dst + y * patch * channels);
      }
    }
  }
  return Tensor::from({gh * gw, pdim}, std::move(out));
}

Tensor patchify_batch(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4) {
    throw std::invalid_argument("patchify_batch: expected [B, H, W, C], got " + shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (should_record({&images})) {
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
      throw std::invalid_argument("patchify_batch: image is not divisible by the patch size");
    }
    // Differentiable path: the same copy expressed as reshape + permute.
    const std::size_t gh = h / patch, gw = w / patch;
    const Tensor grid = permute(reshape(images, {b, gh, patch, gw, patch, c}), {0, 1, 3, 2, 4, 5});
    return reshape(grid, {b, gh * gw, patch * patch * c});
  }
  const std::size_t per_image = h * w * c;
  std::vector<double> out;
  std::size_t n = 0, pdim = 0;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor p = patchify(images.data().subspan(i * per_image, per_image), h, w, c, patch);
    n = p.dim(0);
    pdim = p.dim(1);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor::from({b, n, pdim}, std::move(out));
}

Tensor embed_patches(const Tensor& patches, const BackboneParams& params) {
  return add(matmul(patches, params.patch_weight), params.patch_bias);
}

Tensor broadcast_token(const Tensor& token, std::size_t batch) {
  const std::size_t d = token.numel();
  const std::vector<std::size_t> zeros(batch, 0);
  return reshape(index_select(reshape(token, {1, d}), 0, zeros), {batch, 1, d});
}

Tensor embed_and_assemble(const Tensor& patches, const BackboneParams& params) {
  const Tensor tokens = add(embed_patches(patches, params), params.pos_embed);
  const Tensor parts[] = {broadcast_token(params.cls_token, patches.dim(0)), tokens};
  return concat(parts, 1);
}

Tensor attention(const Tensor& x, const LayerParams& layer, std::size_t heads, Tensor* weights) {
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  const std::size_t hd = d / heads;
  const Tensor qkv = add(matmul(x, layer.qkv_weight), layer.qkv_bias);  // [B, S, 3d]
  // [B, S, 3, h, hd] -> [3, B, h, S, hd]
  const Tensor split = permute(reshape(qkv, {b, s, 3, heads, hd}), {2, 0, 3, 1, 4});
  auto part = [&](std::size_t i) { return reshape(slice(split, 0, i, 1), {b * heads, s, hd}); };
  const Tensor q = part(0), k = part(1), v = part(2);
  const Tensor scores = scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(hd)));
  const Tensor probs = softmax(scores, -1);
  if (weights != nullptr) {
    *weights = probs;
  }
  const Tensor ctx = bmm(probs, v);  // [B*h, S, hd]
  const Tensor merged = reshape(permute(reshape(ctx, {b, heads, s, hd}), {0, 2, 1, 3}), {b, s, d});
  return add(matmul(merged, layer.proj_weight), layer.proj_bias);
}

Tensor transformer_layer(const Tensor& x, const LayerParams& layer, const ViTConfig& config) {
  const Tensor h = add(x, attention(layer_norm(x, layer.norm1_gain, layer.norm1_bias, config.norm_eps), layer,
                                    config.heads));
  const Tensor n2 = layer_norm(h, layer.norm2_gain, layer.norm2_bias, config.norm_eps);
  const Tensor ff = add(matmul(activation(add(matmul(n2, layer.fc1_weight), layer.fc1_bias), config.ffn_activation),
                               layer.fc2_weight),
                        layer.fc2_bias);
  return add(h, ff);
}

Tensor cls_readout(const Tensor& x, const BackboneParams& params, const ViTConfig& config) {
  const Tensor normed = layer_norm(x, params.norm_gain, params.norm_bias, config.norm_eps);
  return reshape(slice(normed, 1, 0, 1), {x.dim(0), x.dim(2)});
}

Tensor classify(const Tensor& embedding, const ClassifierHead& head) {
  return add(matmul(embedding, head.weight), head.bias);
}

ForwardOutput vit_forward(const Tensor& images, const BackboneParams& params, const ClassifierHead& head,
                          const ViTConfig& config) {
  Tensor x = embed_and_assemble(patchify_batch(images, config.patch), params);
  const std::size_t seq_len = x.dim(1);
  for (const LayerParams& layer : params.layers) {
    x = transformer_layer(x, layer, config);
  }
  ForwardOutput out;
  out.embedding = cls_readout(x, params, config);
  out.logits = classify(out.embedding, head);
  out.seq_len = seq_len;
  return out;
}

}  // namespace ctxvit
