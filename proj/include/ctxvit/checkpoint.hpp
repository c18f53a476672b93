#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctxvit/model.hpp"
#include "ctxvit/train.hpp"

namespace ctxvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// Layout: magic "CVITCKPT", u32 version, config hash, resolved config text,
// named entries (name, rank, dims, little-endian doubles), EMA buffers and
// an optional optimizer state. Strings are u32-length-prefixed.
struct Checkpoint {
  std::string config_hash;
  std::string config_text;
  std::vector<CheckpointEntry> entries;
  double ema_lambda = 0.99;
  std::map<GroupId, std::vector<double>> ema;
  std::optional<OptimState> optimizer;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint");

Checkpoint checkpoint_from_model(const Model& model, std::string config_hash, std::string config_text,
                                 const OptimState* optimizer = nullptr);
// Copies values into `model`. The entry names and shapes must match the
// model's parameter list exactly; the first mismatch is named in the error.
void restore_model(const Checkpoint& ckpt, Model& model);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace ctxvit
