#include "attnlr/spectral.hpp"

#include <algorithm>
#include <cstdio>

#include "attnlr/binary_io.hpp"
#include "attnlr/error.hpp"

namespace attnlr::spectral {

namespace {

Eigen::Index ix(std::size_t i) { return static_cast<Eigen::Index>(i); }

void check_orthonormal(const Matrix& v, std::size_t k) {
  const auto vk = v.leftCols(ix(k));
  const Matrix gram = vk.transpose() * vk;
  if ((gram - Matrix::Identity(ix(k), ix(k))).cwiseAbs().maxCoeff() > 1e-6) {
    fail(ErrorCategory::Domain, "projection basis is not column-orthonormal");
  }
}

}  // namespace

double EnergyCurve::at(std::size_t k) const {
  if (k == 0) return 0.0;
  if (k > cumulative.size()) fail(ErrorCategory::Domain, "energy curve: k exceeds dimension");
  return cumulative[k - 1];
}

EnergyCurve energy_curve(const Vector& eigenvalues) {
  EnergyCurve out;
  out.cumulative.resize(static_cast<std::size_t>(eigenvalues.size()));
  double running = 0.0;
  for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) {
    running += std::max(eigenvalues(i), 0.0);
    out.cumulative[static_cast<std::size_t>(i)] = running;
  }
  if (!(running > 0.0)) fail(ErrorCategory::Domain, "energy curve: zero trace");
  for (auto& v : out.cumulative) v /= running;
  return out;
}

EnergyCurve energy_curve(const SymMatrix& c) {
  if (!(c.trace() > 0.0)) fail(ErrorCategory::Domain, "energy curve: zero trace");
  return energy_curve(sym_eig(c).values);
}

std::vector<double> projection_curve(const SymMatrix& c, const Matrix& v, const std::vector<std::size_t>& grid) {
  if (static_cast<std::size_t>(v.rows()) != c.dim()) fail(ErrorCategory::DimMismatch, "projection: basis dimension differs");
  const double tr = c.trace();
  if (!(tr > 0.0)) fail(ErrorCategory::Domain, "projection: zero trace");
  const std::size_t kmax = grid.empty() ? 0 : *std::max_element(grid.begin(), grid.end());
  if (kmax > static_cast<std::size_t>(v.cols())) fail(ErrorCategory::DimMismatch, "projection: k exceeds basis size");
  check_orthonormal(v, kmax);
  const Matrix cv = c.dense() * v.leftCols(ix(kmax));
  std::vector<double> cum(kmax + 1, 0.0);
  for (std::size_t col = 0; col < kmax; ++col) {
    const double term = std::max(0.0, v.col(ix(col)).dot(cv.col(ix(col))));
    cum[col + 1] = cum[col] + term;
  }
  std::vector<double> out;
  out.reserve(grid.size());
  for (std::size_t k : grid) out.push_back(cum[k] / tr);
  return out;
}

double projection_energy(const SymMatrix& c, const Matrix& v, std::size_t k) {
  return projection_curve(c, v, {k}).front();
}

std::vector<OverlapReport> overlap_matrix(const std::vector<NamedBasis>& bases,
                                          const std::vector<NamedMatrix>& targets,
                                          const std::vector<std::size_t>& grid) {
  std::vector<OverlapReport> out;
  for (const auto& b : bases) {
    for (const auto& t : targets) {
      if (b.basis.dim() != t.matrix.dim()) {
        fail(ErrorCategory::DimMismatch, "overlap: basis " + b.id + " and target " + t.id + " differ in dimension");
      }
      OverlapReport rep;
      rep.basis_id = b.id;
      rep.target_id = t.id;
      for (std::size_t k : grid) {
        if (k <= b.basis.size()) rep.k.push_back(k);
      }
      rep.value = projection_curve(t.matrix, b.basis.vectors, rep.k);
      out.push_back(std::move(rep));
    }
  }
  return out;
}

std::vector<std::size_t> default_k_grid(std::size_t dim) {
  std::vector<std::size_t> grid;
  const std::size_t dense = std::min<std::size_t>(dim, 512);
  for (std::size_t k = 1; k <= dense; ++k) grid.push_back(k);
  for (std::size_t k = 1024; k < dim; k *= 2) grid.push_back(k);
  if (grid.empty() || grid.back() != dim) grid.push_back(dim);
  return grid;
}

std::size_t retained_vectors(std::size_t dim) { return std::min<std::size_t>(dim, 1024); }

std::vector<double> per_query_vs_global_energy(const std::vector<EigenBasis>& query_bases, const SymMatrix& global) {
  const std::size_t n = query_bases.size();
  if (n * n != global.dim()) fail(ErrorCategory::DimMismatch, "per-query energy: need n bases for an n^2 global matrix");
  const double tr = global.trace();
  if (!(tr > 0.0)) fail(ErrorCategory::Domain, "per-query energy: zero trace");
  std::vector<double> out(n + 1, 0.0);
  for (std::size_t i = 1; i <= n; ++i) {
    double s = 0.0;
    for (const auto& b : query_bases) {
      if (b.size() != n) fail(ErrorCategory::DimMismatch, "per-query energy: basis must be n x n");
      s += std::max(b.values(ix(i - 1)), 0.0);
    }
    out[i] = out[i - 1] + s / tr;
  }
  return out;
}

QueryShares query_shares(const std::vector<EigenBasis>& query_bases, const SymMatrix& global) {
  const double tr = global.trace();
  if (!(tr > 0.0)) fail(ErrorCategory::Domain, "query shares: zero trace");
  QueryShares out;
  for (const auto& b : query_bases) {
    const double own = b.values.cwiseMax(0.0).sum();
    out.over_global_trace.push_back(own / tr);
    out.top1_over_own_trace.push_back(own > 0.0 ? std::max(b.values(0), 0.0) / own : 0.0);
  }
  return out;
}

std::string curve_csv(const std::vector<std::size_t>& k, const std::vector<double>& value) {
  if (k.size() != value.size()) fail(ErrorCategory::DimMismatch, "curve_csv: length mismatch");
  std::string out = "k,value\n";
  char buf[64];
  for (std::size_t i = 0; i < k.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", k[i], value[i]);
    out += buf;
  }
  return out;
}

void write_curve_csv(const std::filesystem::path& path, const std::vector<std::size_t>& k,
                     const std::vector<double>& value) {
  io::write_text_atomic(path, curve_csv(k, value));
}

}  // namespace attnlr::spectral
