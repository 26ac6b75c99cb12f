#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "attnlr/numerics.hpp"

namespace attnlr::recon {

enum class PlanMode { WholeMatrix, PerQuery };

std::string_view mode_name(PlanMode mode);
PlanMode parse_mode(std::string_view name);

struct GreedySelection {
  IndexSet selected;                  // ascending
  std::vector<std::size_t> picks;     // in selection order
  std::vector<double> residual_trace; // trace of C^{k'} after each pick
  bool early_stopped = false;         // residual exhausted before k picks
};

// Greedy trace-minimizing selection. At each step picks the index maximizing
// sum_j (C_ij)^2 / C_ii over the residual covariance, lowest index on ties,
// then applies the rank-1 conditioning update. Indices in warm_start are
// conditioned on first and count toward k.
GreedySelection greedy_select(const SymMatrix& c, std::size_t k, const IndexSet& warm_start = {});

// R = C_{P̄P} C_{PP}^{-1}, shape (l-k) x k. Solved with the ridged factor
// plus iterative refinement (see solve_psd_refined).
Matrix optimal_R(const SymMatrix& c, const IndexSet& p);

// Tr(C_{P̄P̄} - R C_{PP̄} - C_{P̄P} R^T + R C_{PP} R^T).
double expected_mse(const SymMatrix& c, const IndexSet& p, const Matrix& r);

struct FlopsReport {
  std::uint64_t n = 0, d = 0, k = 0, kbar = 0;
  PlanMode mode = PlanMode::PerQuery;
  std::uint64_t approx_flops = 0;
  std::uint64_t exact_flops = 0;
  // approx/exact as an exact reduced fraction and as a double.
  std::uint64_t ratio_num = 0, ratio_den = 1;
  double ratio = 0.0;
};

FlopsReport flops_ratio(std::uint64_t n, std::uint64_t d, std::uint64_t k, PlanMode mode);

// Entries of a at idx, in order.
Vector gather(const Vector& a, const IndexSet& idx);
// R a_P.
Vector reconstruct(const Vector& a_p, const Matrix& r);
// Interleaves exact values (at p) and estimates (at complement(p)) into a
// vector of length dim in original index order.
Vector assemble(const IndexSet& p, const Vector& a_p, const Vector& a_rest, std::size_t dim);

// V_k V_k^T a.
Vector eigen_project(const Vector& a, const EigenBasis& basis, std::size_t k);

struct RowPlan {
  IndexSet indices;
  Matrix r;
  double residual_trace = 0.0;
};

struct PartialPlan {
  PlanMode mode = PlanMode::PerQuery;
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<RowPlan> rows;  // n rows (per-query) or a single entry (whole matrix)
  std::string source_covariance;

  double total_residual() const;
  void validate() const;
};

// One plan per row from the per-query covariances Q^i. When greedy stops
// early the set is padded with the lowest unselected indices so |P_i| = k.
PartialPlan plan_per_query(const std::vector<SymMatrix>& query_cov, std::size_t k);
PartialPlan plan_whole_matrix(const SymMatrix& global_cov, std::size_t k);

// PLAN file: JSON document next to one MATX file per R matrix.
void save_plan(const std::filesystem::path& json_path, const PartialPlan& plan,
               std::vector<std::filesystem::path>* written = nullptr);
PartialPlan load_plan(const std::filesystem::path& json_path);

}  // namespace attnlr::recon
