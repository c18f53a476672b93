#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctxvit/checkpoint.hpp"
#include "ctxvit/config.hpp"
#include "ctxvit/data.hpp"
#include "ctxvit/model.hpp"

namespace ctxvit {

// Raises glibc's mmap threshold so the large, short-lived activation buffers
// are recycled from the heap instead of being faulted in on every step.
void configure_allocator();

// Resolves the config file (optional) and `key=value` overrides, then
// validates. Throws ConfigError.
RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides);

// Creates <output_dir>/<command>-<hash>-<UTC timestamp>, adding a numeric
// suffix instead of reusing an existing directory.
std::filesystem::path create_run_directory(const RunConfig& config, const std::string& command);

// The dataset file named in the config, or a freshly generated one.
DatasetSplit obtain_dataset(const RunConfig& config);

// Rebuilds the model stored in a checkpoint from its embedded config.
Model model_from_checkpoint(const Checkpoint& ckpt);

// Entry point of the `contextvit` tool; returns the process exit status.
int run_cli(int argc, char** argv);

}  // namespace ctxvit
