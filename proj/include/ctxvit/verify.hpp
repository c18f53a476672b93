#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctxvit/model.hpp"

namespace ctxvit {

struct GradCheckOutcome {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t coords_at_kinks = 0;  // excluded, see finite_diff_check
  double seconds = 0.0;
  bool passed = false;
  std::string detail;  // worst coordinate, or the exception text
};

struct GradSuiteOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  // A check fails when more than this fraction of its coordinates straddle a
  // relu hinge, so exclusions stay rare.
  double max_kink_fraction = 0.01;
  // 0 checks every coordinate.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 7;
  bool include_ops = true;
  bool include_models = true;
  std::function<void(const GradCheckOutcome&)> on_result;
};

// 16x16x3 images, patch 4, d = 16, two layers, two heads, four classes.
ViTConfig toy_vit_config();

// Every kind the model-level gradient check covers.
std::vector<std::string> gradient_suite_kinds();

// Overwrites every parameter with seeded normal values (gains around 1) so
// zero-initialized heads do not hide gradient paths.
void randomize_parameters(Model& model, std::uint64_t seed, double scale);

// A small grouped batch of seeded random images from groups {0, 0, 1, 1, 1}.
GroupedBatch toy_batch(const ViTConfig& config, std::uint64_t seed);

std::vector<GradCheckOutcome> run_gradient_suite(const GradSuiteOptions& options = {});

}  // namespace ctxvit
