#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ctxvit/tensor.hpp"

namespace ctxvit {

enum class Activation { gelu, relu };

Activation parse_activation(std::string_view name);

// Deterministic pseudo-normal samples scaled by `scale`.
Tensor randn_seeded(const Shape& shape, std::uint64_t seed, double scale, bool requires_grad = false);

// Elementwise a + b. `b` may also match a trailing suffix of a's shape, in
// which case it is broadcast over the leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// a: [..., k], b: [k, n] -> [..., n]. Leading dimensions of `a` are flattened.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched product: a [B, m, k] with b [B, k, n], or b [B, n, k] when transpose_b.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax(const Tensor& x, int axis);
// Normalizes over the last dimension; gain and bias have that dimension's size.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor activation(const Tensor& x, Activation kind);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor mean_axis(const Tensor& x, std::vector<int> axes);
Tensor sum_axis(const Tensor& x, std::vector<int> axes);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Forward identity; blocks the reverse pass along this edge.
Tensor stop_gradient(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices);

namespace detail {

// Raw kernels, exposed for reuse and testing. All accumulate into `c`.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

// Values produced by stop_gradient during a reference evaluation. While a
// trace is in replay mode, stop_gradient returns the recorded values in call
// order instead of its input, so perturbations never leak through a detached
// edge.
// relu also folds its sign pattern into `relu_signs`, so a gradient check can
// tell when a perturbation crossed a hinge.
struct DetachTrace {
  bool replay = false;
  std::vector<std::vector<double>> values;
  std::size_t cursor = 0;
  std::uint64_t relu_signs = 0;
};

DetachTrace*& detach_trace();

}  // namespace detail

}  // namespace ctxvit
