#include "attnlr/partial_recon.hpp"

#include <algorithm>
#include <numeric>

#include "attnlr/binary_io.hpp"
#include "attnlr/error.hpp"
#include "attnlr/matx.hpp"
#include "json.hpp"

namespace attnlr::recon {

namespace {

Eigen::Index ix(std::size_t i) { return static_cast<Eigen::Index>(i); }

// Conditions the residual on index i: C <- C - c_i c_i^T / C_ii over the
// still-active indices. Row/col i become exactly zero.
void condition_on(Matrix& res, std::vector<char>& active, std::size_t i) {
  const double pivot = res(ix(i), ix(i));
  active[i] = 0;
  const Eigen::Index l = res.rows();
  if (pivot > 0.0) {
    const Vector col = res.col(ix(i));
    for (Eigen::Index b = 0; b < l; ++b) {
      if (!active[static_cast<std::size_t>(b)]) continue;
      const double cb = col(b) / pivot;
      if (cb == 0.0) continue;
      for (Eigen::Index a = 0; a < l; ++a) {
        if (active[static_cast<std::size_t>(a)]) res(a, b) -= col(a) * cb;
      }
    }
  }
  res.row(ix(i)).setZero();
  res.col(ix(i)).setZero();
}

double active_trace(const Matrix& res, const std::vector<char>& active) {
  double t = 0.0;
  for (Eigen::Index a = 0; a < res.rows(); ++a) {
    if (active[static_cast<std::size_t>(a)]) t += res(a, a);
  }
  return t;
}

}  // namespace

std::string_view mode_name(PlanMode mode) {
  return mode == PlanMode::PerQuery ? "per-query" : "whole-matrix";
}

PlanMode parse_mode(std::string_view name) {
  if (name == "per-query") return PlanMode::PerQuery;
  if (name == "whole-matrix") return PlanMode::WholeMatrix;
  fail(ErrorCategory::Config, "unknown plan mode '" + std::string(name) + "'");
}

GreedySelection greedy_select(const SymMatrix& c, std::size_t k, const IndexSet& warm_start) {
  const std::size_t l = c.dim();
  if (k < 1 || k >= l) fail(ErrorCategory::Domain, "greedy_select: k must satisfy 1 <= k < dim");
  validate_index_set(warm_start, l, false);
  if (warm_start.size() > k) fail(ErrorCategory::Domain, "greedy_select: warm start larger than k");

  Matrix res = c.dense();
  std::vector<char> active(l, 1);
  const double eps_abs = 1e-12 * std::max(c.trace(), 0.0);
  GreedySelection out;

  for (std::size_t i : warm_start) {
    condition_on(res, active, i);
    out.picks.push_back(i);
    out.residual_trace.push_back(active_trace(res, active));
  }

  while (out.picks.size() < k) {
    std::size_t best = l;
    double best_score = -1.0;
    bool any_left = false;
    for (std::size_t i = 0; i < l; ++i) {
      if (!active[i]) continue;
      const double cii = res(ix(i), ix(i));
      double score = 0.0;
      if (cii > eps_abs) {
        any_left = true;
        double s = 0.0;
        for (std::size_t j = 0; j < l; ++j) {
          if (active[j]) s += res(ix(i), ix(j)) * res(ix(i), ix(j));
        }
        score = s / cii;
      }
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    if (!any_left) {
      out.early_stopped = true;
      break;
    }
    condition_on(res, active, best);
    out.picks.push_back(best);
    out.residual_trace.push_back(active_trace(res, active));
  }

  out.selected = out.picks;
  std::sort(out.selected.begin(), out.selected.end());
  return out;
}

Matrix optimal_R(const SymMatrix& c, const IndexSet& p) {
  validate_index_set(p, c.dim(), true);
  const IndexSet rest = complement(p, c.dim());
  // R^T = C_PP^{-1} C_{P P̄}; the ridge only preconditions the solve.
  const Matrix rt = solve_psd_refined(c.principal(p), c.crop(p, rest));
  return rt.transpose();
}

double expected_mse(const SymMatrix& c, const IndexSet& p, const Matrix& r) {
  validate_index_set(p, c.dim(), true);
  const IndexSet rest = complement(p, c.dim());
  if (r.rows() != ix(rest.size()) || r.cols() != ix(p.size())) {
    fail(ErrorCategory::DimMismatch, "expected_mse: R has the wrong shape");
  }
  const Matrix c_rr = c.crop(rest, rest);
  const Matrix c_rp = c.crop(rest, p);
  const Matrix c_pp = c.crop(p, p);
  return c_rr.trace() - 2.0 * (r.transpose() * c_rp).trace() + (r * c_pp * r.transpose()).trace();
}

FlopsReport flops_ratio(std::uint64_t n, std::uint64_t d, std::uint64_t k, PlanMode mode) {
  if (n == 0 || d == 0) fail(ErrorCategory::Domain, "flops_ratio: n and d must be positive");
  FlopsReport rep;
  rep.n = n;
  rep.d = d;
  rep.k = k;
  rep.mode = mode;
  if (mode == PlanMode::PerQuery) {
    if (k > n) fail(ErrorCategory::Domain, "flops_ratio: per-query k must be <= n");
    rep.kbar = n * k;
    rep.approx_flops = rep.kbar * d + rep.kbar * n;
  } else {
    if (k > n * n) fail(ErrorCategory::Domain, "flops_ratio: whole-matrix k must be <= n^2");
    rep.kbar = k;
    rep.approx_flops = rep.kbar * d + rep.kbar * n * n;
  }
  rep.exact_flops = n * n * d;
  const std::uint64_t g = std::gcd(rep.approx_flops, rep.exact_flops);
  rep.ratio_num = rep.approx_flops / g;
  rep.ratio_den = rep.exact_flops / g;
  rep.ratio = static_cast<double>(rep.approx_flops) / static_cast<double>(rep.exact_flops);
  return rep;
}

Vector gather(const Vector& a, const IndexSet& idx) {
  Vector out(ix(idx.size()));
  for (std::size_t t = 0; t < idx.size(); ++t) {
    if (idx[t] >= static_cast<std::size_t>(a.size())) fail(ErrorCategory::DimMismatch, "gather: index out of range");
    out(ix(t)) = a(ix(idx[t]));
  }
  return out;
}

Vector reconstruct(const Vector& a_p, const Matrix& r) {
  if (a_p.size() != r.cols()) fail(ErrorCategory::DimMismatch, "reconstruct: |a_P| does not match R");
  return r * a_p;
}

Vector assemble(const IndexSet& p, const Vector& a_p, const Vector& a_rest, std::size_t dim) {
  if (a_p.size() != ix(p.size()) || a_p.size() + a_rest.size() != ix(dim)) {
    fail(ErrorCategory::DimMismatch, "assemble: lengths do not add up to dim");
  }
  validate_index_set(p, dim, false);
  Vector out(ix(dim));
  std::size_t cp = 0, cr = 0;
  for (std::size_t i = 0; i < dim; ++i) {
    if (cp < p.size() && p[cp] == i) {
      out(ix(i)) = a_p(ix(cp++));
    } else {
      out(ix(i)) = a_rest(ix(cr++));
    }
  }
  return out;
}

Vector eigen_project(const Vector& a, const EigenBasis& basis, std::size_t k) {
  if (static_cast<std::size_t>(a.size()) != basis.dim()) fail(ErrorCategory::DimMismatch, "eigen_project: dim mismatch");
  if (k > basis.size()) fail(ErrorCategory::DimMismatch, "eigen_project: k exceeds basis size");
  const auto v = basis.vectors.leftCols(ix(k));
  return v * (v.transpose() * a);
}

double PartialPlan::total_residual() const {
  double t = 0.0;
  for (const auto& r : rows) t += r.residual_trace;
  return t;
}

void PartialPlan::validate() const {
  const std::size_t l = mode == PlanMode::PerQuery ? n : n * n;
  const std::size_t expected_rows = mode == PlanMode::PerQuery ? n : 1;
  if (rows.size() != expected_rows) fail(ErrorCategory::Format, "plan: wrong number of rows");
  if (k >= l && !(mode == PlanMode::PerQuery && k == n)) fail(ErrorCategory::Format, "plan: k out of range");
  for (const auto& row : rows) {
    if (row.indices.size() != k) fail(ErrorCategory::Format, "plan: index set size differs from k");
    validate_index_set(row.indices, l, false);
    if (row.r.rows() != ix(l - k) || row.r.cols() != ix(k)) fail(ErrorCategory::Format, "plan: R has the wrong shape");
    if (!row.r.allFinite()) fail(ErrorCategory::Format, "plan: non-finite R");
    if (row.residual_trace < 0.0) fail(ErrorCategory::Format, "plan: negative residual trace");
  }
}

PartialPlan plan_per_query(const std::vector<SymMatrix>& query_cov, std::size_t k) {
  PartialPlan plan;
  plan.mode = PlanMode::PerQuery;
  plan.n = query_cov.size();
  plan.k = k;
  for (const auto& q : query_cov) {
    if (q.dim() != plan.n) fail(ErrorCategory::DimMismatch, "plan_per_query: Q^i must be n x n");
    RowPlan row;
    if (k == plan.n) {
      // Full observation: nothing to reconstruct.
      row.indices.resize(k);
      std::iota(row.indices.begin(), row.indices.end(), std::size_t{0});
      row.r = Matrix(0, ix(k));
      row.residual_trace = 0.0;
    } else {
      auto sel = greedy_select(q, k);
      row.indices = sel.selected;
      for (std::size_t i = 0; row.indices.size() < k; ++i) {
        if (!std::binary_search(row.indices.begin(), row.indices.end(), i)) {
          row.indices.insert(std::lower_bound(row.indices.begin(), row.indices.end(), i), i);
        }
      }
      row.r = optimal_R(q, row.indices);
      row.residual_trace = std::max(0.0, schur_complement(q, row.indices).trace());
    }
    plan.rows.push_back(std::move(row));
  }
  return plan;
}

PartialPlan plan_whole_matrix(const SymMatrix& global_cov, std::size_t k) {
  const std::size_t l = global_cov.dim();
  std::size_t n = 0;
  while (n * n < l) ++n;
  if (n * n != l) fail(ErrorCategory::DimMismatch, "plan_whole_matrix: dim must be a perfect square");
  PartialPlan plan;
  plan.mode = PlanMode::WholeMatrix;
  plan.n = n;
  plan.k = k;
  auto sel = greedy_select(global_cov, k);
  RowPlan row;
  row.indices = sel.selected;
  for (std::size_t i = 0; row.indices.size() < k; ++i) {
    if (!std::binary_search(row.indices.begin(), row.indices.end(), i)) {
      row.indices.insert(std::lower_bound(row.indices.begin(), row.indices.end(), i), i);
    }
  }
  row.r = optimal_R(global_cov, row.indices);
  row.residual_trace = std::max(0.0, schur_complement(global_cov, row.indices).trace());
  plan.rows.push_back(std::move(row));
  return plan;
}

void save_plan(const std::filesystem::path& json_path, const PartialPlan& plan,
               std::vector<std::filesystem::path>* written) {
  plan.validate();
  nlohmann::ordered_json doc;
  doc["format"] = "PLAN";
  doc["version"] = 1;
  doc["mode"] = std::string(mode_name(plan.mode));
  doc["n"] = plan.n;
  doc["k"] = plan.k;
  doc["source_covariance"] = plan.source_covariance;
  const std::string stem = json_path.stem().string();
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < plan.rows.size(); ++i) {
    const auto& row = plan.rows[i];
    const std::string rname = stem + (plan.mode == PlanMode::PerQuery ? ".row" + std::to_string(i) : std::string()) + ".R.matx";
    const auto rpath = json_path.parent_path() / rname;
    io::save_matx(rpath, row.r);
    if (written) written->push_back(rpath);
    nlohmann::ordered_json jr;
    jr["row"] = i;
    jr["indices"] = row.indices;
    jr["R"] = rname;
    jr["residual_trace"] = row.residual_trace;
    rows.push_back(std::move(jr));
  }
  doc["rows"] = std::move(rows);
  io::write_text_atomic(json_path, doc.dump(2) + "\n");
  if (written) written->push_back(json_path);
}

PartialPlan load_plan(const std::filesystem::path& json_path) {
  const auto bytes = io::read_file(json_path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Format, "plan: invalid JSON in " + json_path.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "PLAN") fail(ErrorCategory::Format, "plan: missing PLAN format tag");
  PartialPlan plan;
  try {
    plan.mode = parse_mode(doc.at("mode").get<std::string>());
    plan.n = doc.at("n").get<std::size_t>();
    plan.k = doc.at("k").get<std::size_t>();
    plan.source_covariance = doc.value("source_covariance", "");
    for (const auto& jr : doc.at("rows")) {
      RowPlan row;
      row.indices = jr.at("indices").get<IndexSet>();
      row.r = io::load_matx(json_path.parent_path() / jr.at("R").get<std::string>());
      row.residual_trace = jr.at("residual_trace").get<double>();
      plan.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::Format, std::string("plan: malformed document: ") + e.what());
  }
  plan.validate();
  return plan;
}

}  // namespace attnlr::recon
