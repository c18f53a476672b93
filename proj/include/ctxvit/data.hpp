#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ctxvit/context.hpp"

namespace ctxvit {

// Recipe for a grouped covariate-shift benchmark. Every image is
//   clip(0.5 + class_template(label) + group_bias + group_contrast * texture + noise, 0, 1)
// where the class template is a per-class colour offset plus an orthogonal
// spatial pattern, the group bias is a per-channel offset in
// [-bias_max, bias_max] and the contrast multiplier lies in [1 - gamma, 1 + gamma].
struct SyntheticShiftSpec {
  std::size_t num_classes = 8;
  std::size_t train_groups = 4;
  std::size_t ood_groups = 2;
  std::size_t images_per_group = 512;
  std::size_t image_h = 16;
  std::size_t image_w = 16;
  std::size_t channels = 3;
  std::size_t texture_period = 4;
  double bias_max = 0.25;
  double contrast_gamma = 0.5;
  double texture_amp = 0.05;
  double noise_std = 0.1;
  double signal_amp = 0.03;
  double color_amp = 0.1;
  double val_fraction = 0.1;
  double test_fraction = 0.2;

  void validate() const;
};

struct Sample {
  std::vector<double> pixels;  // [H, W, C]
  int label = 0;
  GroupId group = 0;
};

struct DatasetSplit {
  std::size_t image_h = 0;
  std::size_t image_w = 0;
  std::size_t channels = 0;
  std::size_t num_classes = 0;
  std::vector<GroupId> train_group_ids;
  std::vector<GroupId> ood_group_ids;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> id_test;
  std::vector<Sample> ood_test;

  std::size_t image_size() const { return image_h * image_w * channels; }
  const std::vector<Sample>& split(const std::string& name) const;
};

struct GroupShift {
  std::vector<double> bias;  // per channel
  double contrast = 1.0;
};

// Per-group shift parameters; a pure function of (group, seed).
GroupShift group_shift(const SyntheticShiftSpec& spec, GroupId group, std::uint64_t seed);
// Class template [H, W, C] for `label`.
std::vector<double> class_template(const SyntheticShiftSpec& spec, int label);

DatasetSplit generate_dataset(const SyntheticShiftSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Batching

enum class SamplerKind { uniform, context };

SamplerKind parse_sampler(const std::string& name);
std::string sampler_name(SamplerKind kind);

using BatchPlan = std::vector<std::vector<std::size_t>>;

// Shuffled fixed-size batches over all samples; the final short batch is kept.
BatchPlan uniform_sampler(std::span<const Sample> samples, std::size_t batch_size, std::uint64_t seed);
// Single-group batches; groups are visited round-robin in a seeded order.
BatchPlan context_sampler(std::span<const Sample> samples, std::size_t batch_size, std::uint64_t seed);
BatchPlan make_batches(std::span<const Sample> samples, std::size_t batch_size, SamplerKind sampler,
                       std::uint64_t seed);

GroupedBatch gather_batch(std::span<const Sample> samples, std::span<const std::size_t> indices,
                          std::size_t image_h, std::size_t image_w, std::size_t channels);

// ---------------------------------------------------------------------------
// Persistence

void save_dataset(const DatasetSplit& data, const std::filesystem::path& path);
DatasetSplit load_dataset(const std::filesystem::path& path);
// Human-readable JSON listing split sizes and group ids.
std::string dataset_manifest(const DatasetSplit& data);

}  // namespace ctxvit
