#include "attnlr/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "attnlr/error.hpp"

namespace attnlr {

namespace {

Eigen::Index ix(std::size_t i) { return static_cast<Eigen::Index>(i); }

}  // namespace

SymMatrix::SymMatrix(std::size_t dim) : m_(Matrix::Zero(ix(dim), ix(dim))) {
  if (dim == 0) fail(ErrorCategory::Domain, "SymMatrix dimension must be >= 1");
}

SymMatrix SymMatrix::identity(std::size_t dim) {
  SymMatrix s(dim);
  s.m_.setIdentity();
  return s;
}

SymMatrix SymMatrix::diagonal(const std::vector<double>& diag) {
  SymMatrix s(diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) s.m_(ix(i), ix(i)) = diag[i];
  return s;
}

SymMatrix SymMatrix::from_dense(const Matrix& m, double tol) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    fail(ErrorCategory::DimMismatch, "SymMatrix requires a non-empty square matrix");
  }
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > tol * scale) {
    fail(ErrorCategory::InvalidInput, "matrix is not symmetric");
  }
  SymMatrix s;
  s.m_ = m;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < j; ++i) {
      const double v = 0.5 * (m(i, j) + m(j, i));
      s.m_(i, j) = v;
      s.m_(j, i) = v;
    }
  }
  return s;
}

SymMatrix SymMatrix::from_upper(Matrix m) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    fail(ErrorCategory::DimMismatch, "SymMatrix requires a non-empty square matrix");
  }
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = j + 1; i < m.rows(); ++i) m(i, j) = m(j, i);
  }
  SymMatrix s;
  s.m_ = std::move(m);
  return s;
}

void SymMatrix::set(std::size_t i, std::size_t j, double v) {
  m_(ix(i), ix(j)) = v;
  m_(ix(j), ix(i)) = v;
}

SymMatrix SymMatrix::principal(const IndexSet& idx) const {
  SymMatrix s(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) {
    for (std::size_t b = a; b < idx.size(); ++b) s.set(a, b, (*this)(idx[a], idx[b]));
  }
  return s;
}

Matrix SymMatrix::crop(const IndexSet& rows, const IndexSet& cols) const {
  Matrix out(ix(rows.size()), ix(cols.size()));
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = 0; b < cols.size(); ++b) out(ix(a), ix(b)) = (*this)(rows[a], cols[b]);
  }
  return out;
}

EigenBasis EigenBasis::truncated(std::size_t k) const {
  k = std::min(k, size());
  return {values.head(ix(k)), vectors.leftCols(ix(k))};
}

EigenBasis sym_eig(const SymMatrix& m) {
  if (!m.all_finite()) fail(ErrorCategory::InvalidInput, "sym_eig: non-finite entries");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m.dense(), Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    fail(ErrorCategory::InvalidInput, "sym_eig: eigensolver did not converge");
  }
  const Eigen::Index n = m.dense().rows();
  EigenBasis out{Vector(n), Matrix(n, n)};
  // Eigen returns ascending order.
  for (Eigen::Index c = 0; c < n; ++c) {
    const Eigen::Index src = n - 1 - c;
    out.values(c) = solver.eigenvalues()(src);
    Vector v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (std::abs(v(r)) > best) {
        best = std::abs(v(r));
        arg = r;
      }
    }
    if (v(arg) < 0.0) v = -v;
    out.vectors.col(c) = v;
  }
  return out;
}

double relative_ridge(const SymMatrix& m) {
  return 1e-8 * m.trace() / static_cast<double>(m.dim());
}

Matrix solve_psd(const SymMatrix& m, const Matrix& rhs) {
  if (rhs.rows() != m.dense().rows()) {
    fail(ErrorCategory::DimMismatch, "solve_psd: rhs rows do not match matrix dimension");
  }
  const double ridge = relative_ridge(m);
  Matrix a = m.dense();
  a.diagonal().array() += ridge;
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success || !a.allFinite()) {
    std::ostringstream msg;
    msg << "solve_psd: Cholesky factorization failed with ridge " << ridge;
    throw SingularMatrixError(msg.str(), ridge);
  }
  Matrix x = llt.solve(rhs);
  if (!x.allFinite()) {
    std::ostringstream msg;
    msg << "solve_psd: non-finite solution with ridge " << ridge;
    throw SingularMatrixError(msg.str(), ridge);
  }
  return x;
}

Matrix solve_psd_refined(const SymMatrix& m, const Matrix& rhs, int max_iterations) {
  if (rhs.rows() != m.dense().rows()) {
    fail(ErrorCategory::DimMismatch, "solve_psd_refined: rhs rows do not match matrix dimension");
  }
  if (m.trace() <= 0.0 && m.max_abs() == 0.0) return Matrix::Zero(rhs.rows(), rhs.cols());
  const double ridge = relative_ridge(m);
  Matrix a = m.dense();
  a.diagonal().array() += ridge;
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "solve_psd_refined: Cholesky factorization failed with ridge " << ridge;
    throw SingularMatrixError(msg.str(), ridge);
  }
  Matrix x = llt.solve(rhs);
  double prev = (rhs - m.dense() * x).norm();
  for (int it = 0; it < max_iterations && prev > 0.0; ++it) {
    Matrix next = x + llt.solve(rhs - m.dense() * x);
    const double r = (rhs - m.dense() * next).norm();
    if (!(r < prev)) break;
    x = std::move(next);
    if (r > 0.5 * prev) {
      prev = r;
      break;
    }
    prev = r;
  }
  if (!x.allFinite()) {
    std::ostringstream msg;
    msg << "solve_psd_refined: non-finite solution with ridge " << ridge;
    throw SingularMatrixError(msg.str(), ridge);
  }
  return x;
}

IndexSet complement(const IndexSet& p, std::size_t dim) {
  IndexSet out;
  out.reserve(dim - std::min(dim, p.size()));
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < dim; ++i) {
    if (cursor < p.size() && p[cursor] == i) {
      ++cursor;
    } else {
      out.push_back(i);
    }
  }
  return out;
}

void validate_index_set(const IndexSet& p, std::size_t dim, bool proper) {
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (p[a] >= dim) fail(ErrorCategory::Domain, "index out of range");
    if (a > 0 && p[a] <= p[a - 1]) fail(ErrorCategory::Domain, "index set must be sorted and unique");
  }
  if (proper && (p.empty() || p.size() >= dim)) {
    fail(ErrorCategory::Domain, "index set must be a non-empty proper subset");
  }
}

SymMatrix schur_complement(const SymMatrix& m, const IndexSet& p) {
  validate_index_set(p, m.dim(), true);
  const IndexSet rest = complement(p, m.dim());
  const SymMatrix cpp = m.principal(p);
  const Matrix cp_rest = m.crop(p, rest);
  const Matrix x = solve_psd_refined(cpp, cp_rest);
  const Matrix out = m.crop(rest, rest) - cp_rest.transpose() * x;
  return SymMatrix::from_dense(out, 1e-6);
}

Matrix sample_gaussian(const SymMatrix& cov, std::size_t count, std::uint64_t seed) {
  const EigenBasis eig = sym_eig(cov);
  const double top = eig.values.cwiseAbs().maxCoeff();
  if (eig.values(eig.values.size() - 1) < -1e-8 * top) {
    fail(ErrorCategory::InvalidInput, "sample_gaussian: covariance is not PSD");
  }
  const Vector root = eig.values.cwiseMax(0.0).cwiseSqrt();
  // cov = L L^T with L = V diag(sqrt(lambda)); a sample is L z.
  const Matrix factor_t = (eig.vectors * root.asDiagonal()).transpose();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Eigen::Index dim = ix(cov.dim());
  Matrix z(ix(count), dim);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    for (Eigen::Index c = 0; c < dim; ++c) z(r, c) = normal(rng);
  }
  return z * factor_t;
}

}  // namespace attnlr
