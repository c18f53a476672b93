#include "ctxvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ctxvit/rng.hpp"

#include <cblas.h>

namespace ctxvit {

namespace detail {

namespace {

blasint blas_int(std::size_t v) {
  if (v > static_cast<std::size_t>(std::numeric_limits<blasint>::max())) {
    throw std::length_error("matrix dimension exceeds the BLAS index range");
  }
  return static_cast<blasint>(v);
}

}  // namespace

DetachTrace*& detach_trace() {
  thread_local DetachTrace* trace = nullptr;
  return trace;
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1.0, a,
              blas_int(k), b, blas_int(n), 1.0, c, blas_int(n));
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(k), blas_int(n), blas_int(m), 1.0, a,
              blas_int(k), b, blas_int(n), 1.0, c, blas_int(n));
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  if (m == 0 || n == 0 || k == 0) return;
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m), blas_int(n), blas_int(k), 1.0, a,
              blas_int(k), b, blas_int(k), 1.0, c, blas_int(n));
}

}  // namespace detail

namespace {

using detail::NodePtr;

Tensor make_result(Shape shape, std::vector<double> data, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

void record(const Tensor& out, std::vector<NodePtr> inputs, BackwardFn fn) {
  active_tape()->record(out, std::move(inputs), std::move(fn));
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

Tensor randn_seeded(const Shape& shape, std::uint64_t seed, double scale, bool requires_grad) {
  if (shape.empty()) {
    throw std::invalid_argument("randn_seeded: shape must be non-empty");
  }
  for (std::size_t d : shape) {
    if (d == 0) {
      throw std::invalid_argument("randn_seeded: zero-sized dimension in " + shape_str(shape));
    }
  }
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw std::invalid_argument("randn_seeded: scale must be positive, got " + std::to_string(scale));
  }
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    x = scale * rng.normal();
  }
  return Tensor::from(shape, std::move(v), requires_grad);
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  if (!same && !is_suffix(a.shape(), b.shape())) {
    throw std::invalid_argument("add: cannot broadcast " + shape_str(b.shape()) + " onto " +
                                shape_str(a.shape()));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      out[o * inner + i] = ad[o * inner + i] + bd[i];
    }
  }
  const bool rec = should_record({&a, &b});
  Tensor result = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), bn = b.node();
    record(result, {an, bn}, [an, bn, outer, inner](std::span<const double> g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
        }
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  const bool rec = should_record({&a, &b});
  Tensor result = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), bn = b.node();
    record(result, {an, bn}, [an, bn](std::span<const double> g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const bool rec = should_record({&a, &b});
  Tensor result = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), bn = b.node();
    record(result, {an, bn}, [an, bn](std::span<const double> g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  const bool rec = should_record({&a});
  Tensor result = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node();
    record(result, {an}, [an, s](std::span<const double> g) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expected a [...,k] (rank >= 2) and b [k,n], got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t k = a.shape().back();
  if (k != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.numel() / k;
  const std::size_t n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  Shape shape = a.shape();
  shape.back() = n;
  const bool rec = should_record({&a, &b});
  Tensor result = make_result(std::move(shape), std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), bn = b.node();
    record(result, {an, bn}, [an, bn, m, k, n](std::span<const double> g) {
      if (an->requires_grad) {
        detail::gemm_nt(g.data(), bn->data.data(), an->grad_buffer().data(), m, n, k);
      }
      if (bn->requires_grad) {
        detail::gemm_tn(an->data.data(), g.data(), bn->grad_buffer().data(), m, k, n);
      }
    });
  }
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("bmm: expected matching rank-3 batches, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k) {
    throw std::invalid_argument("bmm: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    const double* as = a.data().data() + s * m * k;
    const double* bs = b.data().data() + s * k * n;
    if (transpose_b) {
      detail::gemm_nt(as, bs, out.data() + s * m * n, m, k, n);
    } else {
      detail::gemm_nn(as, bs, out.data() + s * m * n, m, k, n);
    }
  }
  const bool rec = should_record({&a, &b});
  Tensor result = make_result({batch, m, n}, std::move(out), rec);
  if (rec) {
    NodePtr an = a.node(), bn = b.node();
    record(result, {an, bn}, [an, bn, batch, m, k, n, transpose_b](std::span<const double> g) {
      for (std::size_t s = 0; s < batch; ++s) {
        const double* gs = g.data() + s * m * n;
        const double* as = an->data.data() + s * m * k;
        const double* bs = bn->data.data() + s * k * n;
        if (an->requires_grad) {
          double* ga = an->grad_buffer().data() + s * m * k;
          if (transpose_b) {
            // b stored [n x k]: dA = G * B
            detail::gemm_nn(gs, bs, ga, m, n, k);
          } else {
            detail::gemm_nt(gs, bs, ga, m, n, k);
          }
        }
        if (bn->requires_grad) {
          double* gb = bn->grad_buffer().data() + s * k * n;
          if (transpose_b) {
            // dB[n x k] = G^T A
            detail::gemm_tn(gs, as, gb, m, n, k);
          } else {
            detail::gemm_tn(as, gs, gb, m, k, n);
          }
        }
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  std::vector<double> out(x.numel());
  const double* xd = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = -INFINITY;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double v = xd[base + l * s.inner];
        if (!std::isfinite(v)) {
          throw std::domain_error("softmax: non-finite input");
        }
        mx = std::max(mx, v);
      }
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(xd[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] *= inv;
    }
  }
  const bool rec = should_record({&x});
  Tensor result = make_result(x.shape(), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node();
    std::weak_ptr<detail::Node> yw = result.node();
    record(result, {xn}, [xn, yw, s](std::span<const double> g) {
      const auto yn = yw.lock();
      const std::vector<double>& y = yn->data;
      auto& gx = xn->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          double dot = 0.0;
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t idx = base + l * s.inner;
            dot += g[idx] * y[idx];
          }
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t idx = base + l * s.inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (!(eps > 0.0)) {
    throw std::invalid_argument("layer_norm: eps must be positive");
  }
  if (x.rank() < 1) {
    throw std::invalid_argument("layer_norm: input must have rank >= 1");
  }
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n) {
    throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  const double* xd = x.data().data();
  const double* gd = gain.data().data();
  const double* bd = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mean) * rs;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gd[j] + bd[j];
    }
  }
  const bool rec = should_record({&x, &gain, &bias});
  Tensor result = make_result(x.shape(), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
    record(result, {xn, gn, bn},
           [xn, gn, bn, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](std::span<const double> g) {
             if (gn->requires_grad) {
               auto& gg = gn->grad_buffer();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
             }
             if (bn->requires_grad) {
               auto& gb = bn->grad_buffer();
               for (std::size_t r = 0; r < rows; ++r)
                 for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
             }
             if (xn->requires_grad) {
               auto& gx = xn->grad_buffer();
               const double inv_n = 1.0 / static_cast<double>(n);
               for (std::size_t r = 0; r < rows; ++r) {
                 double m1 = 0.0, m2 = 0.0;
                 for (std::size_t j = 0; j < n; ++j) {
                   const double gh = g[r * n + j] * gn->data[j];
                   m1 += gh;
                   m2 += gh * xhat[r * n + j];
                 }
                 m1 *= inv_n;
                 m2 *= inv_n;
                 for (std::size_t j = 0; j < n; ++j) {
                   const double gh = g[r * n + j] * gn->data[j];
                   gx[r * n + j] += rstd[r] * (gh - m1 - xhat[r * n + j] * m2);
                 }
               }
             }
           });
  }
  return result;
}

// 0.5 * (1 + tanh(u)) == sigmoid(2u), so gelu(v) = v * sigmoid(2u) with
// u = c * (v + a v^3). One exp per element, and no cancellation in 1 + tanh.
Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = v / (1.0 + std::exp(-2.0 * kGeluC * (v + kGeluA * v * v * v)));
  }
  const bool rec = should_record({&x});
  Tensor result = make_result(x.shape(), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node();
    record(result, {xn}, [xn](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xn->data[i];
        const double s = 1.0 / (1.0 + std::exp(-2.0 * kGeluC * (v + kGeluA * v * v * v)));
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        gx[i] += g[i] * (s + 2.0 * v * s * (1.0 - s) * du);
      }
    });
  }
  return result;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (detail::DetachTrace* trace = detail::detach_trace()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      word = (word << 1) | (x[i] > 0.0 ? 1u : 0u);
      if (i % 64 == 63 || i + 1 == out.size()) {
        trace->relu_signs = mix64(trace->relu_signs ^ word);
        word = 0;
      }
    }
  }
  const bool rec = should_record({&x});
  Tensor result = make_result(x.shape(), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node();
    record(result, {xn}, [xn](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xn->data[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return result;
}

Tensor activation(const Tensor& x, Activation kind) {
  return kind == Activation::gelu ? gelu(x) : relu(x);
}

namespace {

Tensor reduce_axes(const Tensor& x, const std::vector<int>& axes, bool average, const char* op) {
  const std::size_t rank = x.rank();
  std::vector<bool> reduce(rank, false);
  for (int a : axes) {
    const std::size_t ax = normalize_axis(a, rank, op);
    if (reduce[ax]) {
      throw std::invalid_argument(std::string(op) + ": repeated axis " + std::to_string(a));
    }
    reduce[ax] = true;
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    if (reduce[i]) {
      count *= x.dim(i);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  if (count == 0) {
    throw std::invalid_argument(std::string(op) + ": empty reduction over " + shape_str(x.shape()));
  }
  // Map every input element to its output slot via per-axis strides.
  std::vector<std::size_t> out_stride(rank, 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = rank; i-- > 0;) {
      if (!reduce[i]) {
        out_stride[i] = stride;
        stride *= x.dim(i);
      }
    }
  }
  std::vector<std::size_t> target(x.numel());
  {
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < x.numel(); ++flat) {
      std::size_t t = 0;
      for (std::size_t i = 0; i < rank; ++i) t += idx[i] * out_stride[i];
      target[flat] = t;
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < x.dim(i)) break;
        idx[i] = 0;
      }
    }
  }
  const double inv = average ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<double> out(shape_numel(out_shape), 0.0);
  for (std::size_t flat = 0; flat < x.numel(); ++flat) out[target[flat]] += x[flat];
  if (average) {
    for (double& v : out) v *= inv;
  }
  const bool rec = should_record({&x});
  Tensor result = make_result(std::move(out_shape), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node();
    record(result, {xn}, [xn, inv, target = std::move(target)](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t flat = 0; flat < gx.size(); ++flat) gx[flat] += g[target[flat]] * inv;
    });
  }
  return result;
}

}  // namespace

Tensor mean_axis(const Tensor& x, std::vector<int> axes) { return reduce_axes(x, axes, true, "mean_axis"); }

Tensor sum_axis(const Tensor& x, std::vector<int> axes) { return reduce_axes(x, axes, false, "sum_axis"); }

Tensor sum_all(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  const bool rec = should_record({&x});
  Tensor result = make_result({}, {total}, rec);
  if (rec) {
    NodePtr xn = x.node();
    record(result, {xn}, [xn](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (double& v : gx) v += g[0];
    });
  }
  return result;
}

Tensor mean_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return mean_axis(x, axes);
}

Tensor stop_gradient(const Tensor& x) {
  detail::DetachTrace* trace = detail::detach_trace();
  if (trace != nullptr) {
    if (trace->replay) {
      if (trace->cursor >= trace->values.size() || trace->values[trace->cursor].size() != x.numel()) {
        throw std::logic_error("stop_gradient: replay trace does not match the evaluated graph");
      }
      return make_result(x.shape(), trace->values[trace->cursor++], false);
    }
    trace->values.emplace_back(x.values());
  }
  return make_result(x.shape(), x.values(), false);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool rec = should_record({&x});
  Tensor result = make_result(std::move(shape), x.values(), rec);
  if (rec) {
    NodePtr xn = x.node();
    record(result, {xn}, [xn](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) {
    throw std::invalid_argument("permute: order has wrong length");
  }
  std::vector<bool> seen(rank, false);
  for (std::size_t o : order) {
    if (o >= rank || seen[o]) throw std::invalid_argument("permute: invalid axis order");
    seen[o] = true;
  }
  std::vector<std::size_t> in_stride(rank);
  {
    std::size_t stride = 1;
    for (std::size_t i = rank; i-- > 0;) {
      in_stride[i] = stride;
      stride *= x.dim(i);
    }
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(order[i]);
  const bool rec = should_record({&x});
  // source[flat_out] = flat_in, kept only when the backward pass needs it.
  std::vector<std::size_t> source(rec ? x.numel() : 0);
  std::vector<double> out(x.numel());
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t s = 0;
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
      out[flat] = x[s];
      if (rec) source[flat] = s;
      for (std::size_t i = rank; i-- > 0;) {
        s += in_stride[order[i]];
        if (++idx[i] < out_shape[i]) break;
        s -= idx[i] * in_stride[order[i]];
        idx[i] = 0;
      }
    }
  }
  Tensor result = make_result(std::move(out_shape), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node();
    record(result, {xn}, [xn, source = std::move(source)](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[source[i]] += g[i];
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis) || length == 0) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + length) + ") invalid on axis " + std::to_string(axis) +
                                " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  std::vector<double> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* src = x.data().data() + o * s.len * s.inner + start * s.inner;
    std::copy(src, src + chunk, out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  const bool rec = should_record({&x});
  Tensor result = make_result(std::move(out_shape), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node();
    record(result, {xn}, [xn, s, start, chunk](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = gx.data() + o * s.len * s.inner + start * s.inner;
        const double* src = g.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) {
    throw std::invalid_argument("concat: no inputs");
  }
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) {
    throw std::invalid_argument("concat: axis out of range");
  }
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != ref.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
      }
    }
    total += p.dim(axis);
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* src = p.data().data() + o * chunk;
      std::copy(src, src + chunk, out.begin() + static_cast<std::ptrdiff_t>(o * total * s.inner + offset * s.inner));
    }
    offset += p.dim(axis);
  }
  const bool rec = should_record(parts);
  Tensor result = make_result(std::move(out_shape), std::move(out), rec);
  if (rec) {
    std::vector<NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    record(result, nodes, [nodes, offsets, s, total, axis](std::span<const double> g) {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const auto& pn = nodes[k];
        if (!pn->requires_grad) continue;
        auto& gp = pn->grad_buffer();
        const std::size_t chunk = pn->shape[axis] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = g.data() + o * total * s.inner + offsets[k] * s.inner;
          double* dst = gp.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
  if (axis >= x.rank()) {
    throw std::invalid_argument("index_select: axis out of range");
  }
  const AxisSplit s = split_at(x.shape(), axis);
  for (std::size_t i : indices) {
    if (i >= s.len) {
      throw std::out_of_range("index_select: index " + std::to_string(i) + " out of range for axis of size " +
                              std::to_string(s.len));
    }
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  const std::size_t count = indices.size();
  std::vector<double> out(s.outer * count * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < count; ++j) {
      const double* src = x.data().data() + (o * s.len + indices[j]) * s.inner;
      std::copy(src, src + s.inner, out.begin() + static_cast<std::ptrdiff_t>((o * count + j) * s.inner));
    }
  }
  const bool rec = should_record({&x});
  Tensor result = make_result(std::move(out_shape), std::move(out), rec);
  if (rec) {
    NodePtr xn = x.node();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    record(result, {xn}, [xn, s, idx = std::move(idx)](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      const std::size_t count = idx.size();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < count; ++j) {
          double* dst = gx.data() + (o * s.len + idx[j]) * s.inner;
          const double* src = g.data() + (o * count + j) * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

}  // namespace ctxvit
