#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "attnlr/numerics.hpp"

namespace attnlr::spectral {

// Cumulative eigen energy: value(k) = sum_{i<=k} lambda_i / sum lambda_i.
// Negative round-off eigenvalues are clamped to zero before summing.
struct EnergyCurve {
  std::vector<double> cumulative;  // cumulative[k-1] for k = 1..dim

  std::size_t dim() const { return cumulative.size(); }
  // value at k; k = 0 gives 0
  double at(std::size_t k) const;
};

EnergyCurve energy_curve(const SymMatrix& c);
EnergyCurve energy_curve(const Vector& eigenvalues);

// Tr(V_k^T C V_k) / Tr(C). V must be column-orthonormal to 1e-6.
double projection_energy(const SymMatrix& c, const Matrix& v, std::size_t k);

// Projected energy for every k in grid (ascending), computed in one pass.
std::vector<double> projection_curve(const SymMatrix& c, const Matrix& v, const std::vector<std::size_t>& grid);

struct NamedBasis {
  std::string id;
  EigenBasis basis;
};

struct NamedMatrix {
  std::string id;
  SymMatrix matrix;
};

struct OverlapReport {
  std::string basis_id;
  std::string target_id;
  std::vector<std::size_t> k;
  std::vector<double> value;
};

// Every (basis, target) pair, in basis-major order.
std::vector<OverlapReport> overlap_matrix(const std::vector<NamedBasis>& bases,
                                          const std::vector<NamedMatrix>& targets,
                                          const std::vector<std::size_t>& grid);

// Every integer up to min(dim, 512), then powers of two, then dim itself.
std::vector<std::size_t> default_k_grid(std::size_t dim);

// Eigenvector columns kept per basis: min(dim, 1024).
std::size_t retained_vectors(std::size_t dim);

// value[i] for i = 0..n: top-i eigenvalues summed across all per-query
// bases, over Tr(C_a). Paired with k = i * n on the global curve.
std::vector<double> per_query_vs_global_energy(const std::vector<EigenBasis>& query_bases, const SymMatrix& global);

// Share of each query row, under two normalizations.
struct QueryShares {
  std::vector<double> over_global_trace;  // Tr(Q^i) / Tr(C_a)
  std::vector<double> top1_over_own_trace; // lambda_1(Q^i) / Tr(Q^i)
};

QueryShares query_shares(const std::vector<EigenBasis>& query_bases, const SymMatrix& global);

// "k,value" CSV.
std::string curve_csv(const std::vector<std::size_t>& k, const std::vector<double>& value);
void write_curve_csv(const std::filesystem::path& path, const std::vector<std::size_t>& k,
                     const std::vector<double>& value);

}  // namespace attnlr::spectral
