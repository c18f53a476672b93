#include "ctxvit/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ctxvit {

SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) throw std::invalid_argument("symmetric_eigen: matrix is not n x n");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  auto at = [n](std::vector<double>& m, std::size_t r, std::size_t c) -> double& { return m[r * n + c]; };

  double frob = 0.0;
  for (double x : a) frob += x * x;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += at(a, p, q) * at(a, p, q);
    }
    if (off <= 1e-30 * frob || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(a, p, q);
        if (apq == 0.0) continue;
        const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(a, k, p), akq = at(a, k, q);
          at(a, k, p) = c * akp - s * akq;
          at(a, k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(a, p, k), aqk = at(a, q, k);
          at(a, p, k) = c * apk - s * aqk;
          at(a, q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = at(v, k, p), vkq = at(v, k, q);
          at(v, k, p) = c * vkp - s * vkq;
          at(v, k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return at(a, x, x) > at(a, y, y); });
  SymmetricEigen out;
  for (std::size_t idx : order) {
    out.values.push_back(at(a, idx, idx));
    std::vector<double> vec(n);
    for (std::size_t k = 0; k < n; ++k) vec[k] = at(v, k, idx);
    out.vectors.push_back(std::move(vec));
  }
  return out;
}

PcaResult pca_project(std::span<const std::vector<double>> rows, std::size_t k) {
  if (rows.size() < 2) throw std::invalid_argument("pca_project: need at least two rows");
  const std::size_t d = rows[0].size();
  if (k == 0 || k > d) throw std::invalid_argument("pca_project: k must lie in [1, d]");
  for (const auto& r : rows) {
    if (r.size() != d) throw std::invalid_argument("pca_project: ragged rows");
  }
  const std::size_t m = rows.size();
  PcaResult res;
  res.mean.assign(d, 0.0);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < d; ++j) res.mean[j] += r[j];
  }
  for (double& x : res.mean) x /= static_cast<double>(m);

  std::vector<double> cov(d * d, 0.0);
  std::vector<double> c(d);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < d; ++j) c[j] = r[j] - res.mean[j];
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i; j < d; ++j) cov[i * d + j] += c[i] * c[j];
    }
  }
  const double denom = static_cast<double>(m - 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      cov[i * d + j] /= denom;
      cov[j * d + i] = cov[i * d + j];
    }
  }
  for (std::size_t i = 0; i < d; ++i) res.total_variance += cov[i * d + i];

  SymmetricEigen eig = symmetric_eigen(std::move(cov), d);
  const double zero_tol = 1e-12 * std::max(res.total_variance, 1e-300);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> vec = std::move(eig.vectors[i]);
    for (double x : vec) {
      if (std::abs(x) > 1e-12) {
        if (x < 0.0) {
          for (double& y : vec) y = -y;
        }
        break;
      }
    }
    double lambda = std::max(eig.values[i], 0.0);
    if (lambda <= zero_tol) {
      lambda = 0.0;
      ++res.zero_variance_components;
    }
    res.eigenvalues.push_back(lambda);
    res.explained_variance_ratio.push_back(res.total_variance > 0.0 ? lambda / res.total_variance : 0.0);
    res.components.push_back(std::move(vec));
  }
  for (const auto& r : rows) {
    std::vector<double> proj(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < d; ++j) proj[i] += (r[j] - res.mean[j]) * res.components[i][j];
    }
    res.projections.push_back(std::move(proj));
  }
  return res;
}

}  // namespace ctxvit
