#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ctxvit {

struct SymmetricEigen {
  std::vector<double> values;                // descending
  std::vector<std::vector<double>> vectors;  // vectors[i] pairs with values[i], unit norm
};

// Cyclic Jacobi rotations on a dense symmetric n x n matrix (row-major).
SymmetricEigen symmetric_eigen(std::vector<double> matrix, std::size_t n);

struct PcaResult {
  std::vector<double> mean;
  std::vector<std::vector<double>> components;  // k rows of length d
  std::vector<double> eigenvalues;              // covariance eigenvalues, descending
  std::vector<double> explained_variance_ratio;
  std::vector<std::vector<double>> projections;  // M rows of length k
  double total_variance = 0.0;
  // Trailing components whose eigenvalue is numerically zero (k above the rank).
  std::size_t zero_variance_components = 0;
};

// Mean-centred PCA. Each component is flipped so its first nonzero loading is
// positive. Requires at least two rows and 1 <= k <= d.
PcaResult pca_project(std::span<const std::vector<double>> rows, std::size_t k);

}  // namespace ctxvit
