#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxvit/context.hpp"
#include "ctxvit/vit.hpp"

namespace ctxvit {

// A ContextViT instance: backbone, classifier head, the context parameters the
// chosen kind uses, and EMA buffers.
struct Model {
  ViTConfig config;
  ContextKind kind;
  BackboneParams backbone;
  ClassifierHead head;
  ContextParams context;
  EmaState ema;

  // Every trainable tensor in a fixed order: backbone, context, head.
  std::vector<NamedParam> parameters() const;
  std::vector<NamedParam> backbone_and_context_parameters() const;

  // Toggles gradient tracking for the frozen part and for the head separately.
  void set_trainable(bool backbone_and_context, bool head_trainable);

  ContextForwardOutput forward(const GroupedBatch& batch, const ContextForwardOptions& options = {});
  // Evaluation-mode forward; EMA buffers are read but never advanced.
  ContextForwardOutput infer(const GroupedBatch& batch) const;
  // Snapshot with independent storage.
  Model clone() const;
};

// The backbone, head and context parameters are seeded from separate named
// streams of `seed`, so models of different kinds share a backbone init.
Model init_model(const ViTConfig& config, const ContextKind& kind, std::span<const GroupId> oracle_groups,
                 std::uint64_t seed);

}  // namespace ctxvit
