#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctxvit/tensor.hpp"
#include "ctxvit/vit.hpp"

namespace ctxvit {

using GroupId = std::uint64_t;

// Raised when a context cannot be resolved, e.g. an oracle lookup of a group
// that had no token during training.
class UnknownContextError : public std::runtime_error {
 public:
  explicit UnknownContextError(GroupId group);
  GroupId group() const { return group_; }

 private:
  GroupId group_;
};

enum class ContextMethod {
  none,
  in_context_patches,
  oracle,
  mean,
  mean_linear,
  deep_sets,
  ema,
};

struct ContextKind {
  ContextMethod method = ContextMethod::none;
  bool detach = false;
  bool layerwise = false;
  std::size_t context_patches = 256;
  double ema_lambda = 0.99;

  // Accepts the ablation vocabulary: none, mean, mean_linear,
  // mean_linear_detach, layerwise_mean_linear_detach, deep_sets,
  // deep_sets_detach, oracle, ema, in_context_patches.
  static ContextKind parse(std::string_view name);
  std::string name() const;
  void validate() const;

  // Context inferred from the batch members themselves (never fails on an
  // unseen group).
  bool amortized() const;
  bool uses_linear_heads() const;
  bool adds_context_slot() const;
};

const std::vector<std::string>& context_kind_vocabulary();

// ---------------------------------------------------------------------------
// Groups and batches

struct GroupSlice {
  GroupId group = 0;
  std::vector<std::size_t> indices;
};

// Groups ordered by first occurrence; indices in input order.
using Partition = std::vector<GroupSlice>;

Partition group_partition(std::span<const GroupId> groups);
// slot[i] = position in `partition` of the group of batch element i.
std::vector<std::size_t> partition_inverse(const Partition& partition, std::size_t batch_size);

struct GroupedBatch {
  Tensor images;  // [B, H, W, C]
  std::vector<int> labels;
  std::vector<GroupId> groups;
  Partition partition;

  std::size_t size() const { return labels.size(); }
};

GroupedBatch make_grouped_batch(Tensor images, std::vector<int> labels, std::vector<GroupId> groups);

// ---------------------------------------------------------------------------
// Parameters

struct LinearHead {
  Tensor weight;  // [d, d]; t = x W + b
  Tensor bias;    // [d]
};

// Two residual ReLU hidden layers followed by an affine output layer.
struct SetMlp {
  Tensor hidden1_weight, hidden1_bias;
  Tensor hidden2_weight, hidden2_bias;
  Tensor out_weight, out_bias;
};

struct DeepSetsParams {
  SetMlp phi;
  SetMlp rho;
};

struct ContextParams {
  std::map<GroupId, Tensor> oracle_table;
  std::vector<LinearHead> linear_heads;  // one per layer
  std::vector<DeepSetsParams> deep_sets;  // one per layer

  void collect(std::vector<NamedParam>& out) const;
};

ContextParams init_context_params(const ViTConfig& config, const ContextKind& kind,
                                  std::span<const GroupId> oracle_groups, Rng rng);

struct EmaState {
  double lambda = 0.99;
  std::map<GroupId, std::vector<double>> values;

  // Advances one group's state and returns the new value.
  const std::vector<double>& update(GroupId group, std::span<const double> batch_mean);
};

// ---------------------------------------------------------------------------
// Context inference primitives

// Mean over member images and their patches: member_embeds [M, N, d] -> [d].
Tensor infer_context_mean(const Tensor& member_embeds);
// b + x W, with x passed through stop_gradient first when `detach`. Accepts
// [d] or [G, d].
Tensor apply_linear_head(const Tensor& pooled, const LinearHead& head, bool detach);
Tensor oracle_lookup(GroupId group, const std::map<GroupId, Tensor>& table);
// state <- lambda * state + (1 - lambda) * batch_mean, or batch_mean when
// there is no prior state.
std::vector<double> ema_update(const std::optional<std::vector<double>>& state, std::span<const double> batch_mean,
                               double lambda);
Tensor set_mlp_forward(const Tensor& x, const SetMlp& mlp);
// rho(sum over all member patches of phi(t)): member_embeds [M, N, d] -> [d].
Tensor deep_sets_infer(const Tensor& member_embeds, const DeepSetsParams& params, bool detach);
// K rows drawn uniformly with replacement from the members' patches: [K, d].
Tensor sample_context_patches(const Tensor& member_embeds, std::size_t count, std::uint64_t seed);

// ---------------------------------------------------------------------------
// ContextViT forward

struct ContextForwardOptions {
  // EMA state advances only in training mode.
  bool training = false;
  EmaState* ema = nullptr;
  std::uint64_t sample_seed = 0;
  // Replaces the pooled input of the context head by a constant with the same
  // values, cutting the graph there. Used to verify detach semantics.
  bool freeze_pooled_input = false;
};

struct ContextForwardOutput {
  Tensor embedding;  // [B, d]
  Tensor logits;     // [B, num_classes]
  std::size_t seq_len = 0;
  // One [G, d] tensor per inference step (layer 0 first), rows in partition order.
  std::vector<Tensor> context_tokens;
};

// Token layout: slot 0 CLS, slot 1 context, slots 2..N+1 patches with
// positional embeddings. In-context mode instead appends K sampled patch
// tokens after the patches.
ContextForwardOutput contextvit_forward(const GroupedBatch& batch, const BackboneParams& backbone,
                                        const ClassifierHead& head, const ContextParams& context,
                                        const ContextKind& kind, const ViTConfig& config,
                                        const ContextForwardOptions& options = {});

}  // namespace ctxvit
