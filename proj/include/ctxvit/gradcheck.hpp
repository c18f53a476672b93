#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctxvit/tensor.hpp"

namespace ctxvit {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  // Coordinates whose +-h perturbation changed a relu sign; the loss is not
  // differentiable across that interval, so they are left out of the error.
  std::size_t coords_at_kinks = 0;
};

// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double a, double b);

// Compares reverse-mode gradients of the scalar `loss_fn` with central
// differences (f(p + h e_i) - f(p - h e_i)) / 2h. `loss_fn` must rebuild its
// graph from `params` on every call. Detached edges are held at their
// reference values while perturbing, so only the declared-differentiable
// subgraph is compared. Coordinates whose perturbation crosses a relu hinge
// are counted in coords_at_kinks instead of compared. When `max_coords_per_param` is non-zero, that many
// coordinates per tensor are sampled with `seed` instead of checking all.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  double step, std::size_t max_coords_per_param = 0,
                                  std::uint64_t seed = 0);

}  // namespace ctxvit
