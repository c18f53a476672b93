#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctxvit/context.hpp"
#include "ctxvit/data.hpp"
#include "ctxvit/train.hpp"
#include "ctxvit/vit.hpp"

namespace ctxvit {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Everything a CLI invocation can tune. Serialized as flat `key = value`
// lines; see run_config_keys() for the full list.
struct RunConfig {
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  std::string kind = "mean_linear_detach";
  std::size_t context_patches = 256;
  double ema_lambda = 0.99;
  ViTConfig vit;  // image dims and class count come from `data`
  TrainConfig train;
  SyntheticShiftSpec data;

  std::string output_dir = "runs";
  std::string dataset;     // optional pre-generated dataset file
  std::string checkpoint;  // input checkpoint for probe / sweep / export-context

  std::vector<std::string> ablation_kinds{"none", "mean", "mean_linear", "mean_linear_detach",
                                          "layerwise_mean_linear_detach"};
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
  std::vector<std::size_t> sweep_sizes{1, 8, 64};
  std::size_t token_batches_per_group = 50;
  std::size_t token_batch_size = 64;
  std::size_t token_layer = 0;
  std::size_t pca_components = 2;

  ContextKind context_kind() const;
  ViTConfig vit_config() const;
  TrainConfig train_config() const;  // seed copied in
  void validate() const;

  // Every key in a fixed order, one per line.
  std::string dump() const;
  // 16 hex digits over dump() without the seed line.
  std::string hash() const;
};

const std::vector<std::string>& run_config_keys();

// Sets one key from its text form; unknown keys and malformed values throw.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);
// `key=value`
void apply_override(RunConfig& config, std::string_view assignment);

RunConfig parse_run_config(std::string_view text, const std::string& origin = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace ctxvit
