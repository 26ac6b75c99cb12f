#pragma once

#include <cstdint>
#include <random>

#include "attnlr/numerics.hpp"

namespace attnlr::testing {

// A A^T with A dim x rank standard normal; full rank when rank >= dim.
inline SymMatrix random_psd(std::size_t dim, std::mt19937_64& rng, std::size_t rank = 0) {
  if (rank == 0) rank = dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(rank));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = normal(rng);
  }
  return SymMatrix::from_dense(a * a.transpose());
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  }
  return m;
}

// Random sorted proper subset of {0..dim-1} of the given size.
inline IndexSet random_subset(std::size_t dim, std::size_t size, std::mt19937_64& rng) {
  std::vector<std::size_t> all(dim);
  for (std::size_t i = 0; i < dim; ++i) all[i] = i;
  std::shuffle(all.begin(), all.end(), rng);
  IndexSet p(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(size));
  std::sort(p.begin(), p.end());
  return p;
}

// Columns of x indexed by idx.
inline Matrix take_cols(const Matrix& x, const IndexSet& idx) {
  Matrix out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = x.col(static_cast<Eigen::Index>(idx[c]));
  return out;
}

// Least-squares fit of y on x from samples (rows): returns coefficients B
// with y ~ x B^T, i.e. B = (Y^T X)(X^T X)^{-1}. Independent of any covariance input.
inline Matrix regress(const Matrix& x, const Matrix& y) {
  const Matrix xtx = x.transpose() * x;
  const Matrix ytx = y.transpose() * x;
  return xtx.ldlt().solve(ytx.transpose()).transpose();
}

}  // namespace attnlr::testing
