#include "ctxvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ctxvit/ops.hpp"
#include "ctxvit/rng.hpp"

namespace ctxvit {

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

namespace {

class TraceGuard {
 public:
  explicit TraceGuard(detail::DetachTrace* trace) : previous_(detail::detach_trace()) {
    detail::detach_trace() = trace;
  }
  ~TraceGuard() { detail::detach_trace() = previous_; }
  TraceGuard(const TraceGuard&) = delete;
  TraceGuard& operator=(const TraceGuard&) = delete;

 private:
  detail::DetachTrace* previous_;
};

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  double step, std::size_t max_coords_per_param, std::uint64_t seed) {
  if (!(step > 0.0)) {
    throw std::invalid_argument("finite_diff_check: step must be positive");
  }
  for (Tensor& p : params) {
    if (!p.requires_grad()) {
      throw std::invalid_argument("finite_diff_check: every checked tensor must require grad");
    }
    p.zero_grad();
  }

  detail::DetachTrace trace;
  TraceGuard guard(&trace);

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  const std::uint64_t reference_signs = trace.relu_signs;
  for (Tensor& p : params) {
    analytic.push_back(p.grad());
    p.zero_grad();
  }

  trace.replay = true;
  bool crossed = false;
  auto evaluate = [&]() {
    NoGradScope no_grad;
    trace.cursor = 0;
    trace.relu_signs = 0;
    const double value = loss_fn().item();
    crossed = crossed || trace.relu_signs != reference_signs;
    return value;
  };

  GradCheckResult result;
  Rng rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_param != 0 && coords.size() > max_coords_per_param) {
      rng.shuffle(coords);
      coords.resize(max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    auto data = p.mutable_data();
    for (std::size_t i : coords) {
      const double original = data[i];
      crossed = false;
      data[i] = original + step;
      const double f_plus = evaluate();
      data[i] = original - step;
      const double f_minus = evaluate();
      data[i] = original;
      if (crossed) {
        ++result.coords_at_kinks;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double err = relative_error(analytic[pi][i], numeric);
      ++result.coords_checked;
      if (err > result.max_rel_error || result.coords_checked == 1) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = i;
        result.worst_analytic = analytic[pi][i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace ctxvit
