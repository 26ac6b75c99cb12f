#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace attnlr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Sorted, duplicate-free list of indices into a vector of scores.
using IndexSet = std::vector<std::size_t>;

// Dense symmetric matrix. Both halves are written through set(), so
// (i, j) and (j, i) are always bit-identical.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(std::size_t dim);

  static SymMatrix identity(std::size_t dim);
  static SymMatrix diagonal(const std::vector<double>& diag);
  // Accepts a numerically symmetric matrix (relative asymmetry <= tol) and
  // stores its symmetric part.
  static SymMatrix from_dense(const Matrix& m, double tol = 1e-9);
  // Mirrors the upper triangle of m into the lower one.
  static SymMatrix from_upper(Matrix m);

  std::size_t dim() const { return static_cast<std::size_t>(m_.rows()); }
  double operator()(std::size_t i, std::size_t j) const {
    return m_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  void set(std::size_t i, std::size_t j, double v);

  const Matrix& dense() const { return m_; }
  double trace() const { return m_.trace(); }
  double max_abs() const { return m_.size() ? m_.cwiseAbs().maxCoeff() : 0.0; }
  bool all_finite() const { return m_.allFinite(); }

  // Principal sub-matrix C_{AA}.
  SymMatrix principal(const IndexSet& idx) const;
  // Rectangular crop C_{AB}.
  Matrix crop(const IndexSet& rows, const IndexSet& cols) const;

 private:
  Matrix m_;
};

struct EigenBasis {
  Vector values;   // descending
  Matrix vectors;  // one orthonormal column per value

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.rows()); }
  // Leading k columns.
  EigenBasis truncated(std::size_t k) const;
};

// Symmetric eigendecomposition, values descending, each eigenvector
// sign-normalized so its largest-magnitude entry is positive.
EigenBasis sym_eig(const SymMatrix& m);

// 1e-8 * trace / dim; the ridge added before factorizing a PSD system.
double relative_ridge(const SymMatrix& m);

// Solves (m + ridge I) X = rhs by Cholesky.
Matrix solve_psd(const SymMatrix& m, const Matrix& rhs);

// Solves m X = rhs using the ridged Cholesky factor as a preconditioner for
// iterative refinement. Converges to the unregularized solution when m is
// well conditioned and stays bounded along near-null directions. A zero
// matrix yields X = 0 (pseudo-inverse).
Matrix solve_psd_refined(const SymMatrix& m, const Matrix& rhs, int max_iterations = 20);

// C_{P̄P̄} - C_{P̄P} C_{PP}^{-1} C_{PP̄}, indexed by complement(p).
SymMatrix schur_complement(const SymMatrix& m, const IndexSet& p);

// count x dim matrix of zero-mean Gaussian draws with covariance cov.
Matrix sample_gaussian(const SymMatrix& cov, std::size_t count, std::uint64_t seed);

// Ascending complement of p in {0..dim-1}.
IndexSet complement(const IndexSet& p, std::size_t dim);

// Checks that p is sorted, unique and in range. With proper=true it must also
// be non-empty and not the full set.
void validate_index_set(const IndexSet& p, std::size_t dim, bool proper);

}  // namespace attnlr
