#include <cmath>
#include <filesystem>
#include <random>

#include "attnlr/error.hpp"
#include "attnlr/partial_recon.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace attnlr;
using namespace attnlr::recon;
using attnlr::testing::random_psd;

namespace {

// Trace of the residual covariance over complement(p), recomputed from
// scratch through the Schur complement.
double residual_trace_direct(const SymMatrix& c, const IndexSet& p) {
  return schur_complement(c, p).trace();
}

IndexSet with(IndexSet p, std::size_t i) {
  p.insert(std::lower_bound(p.begin(), p.end(), i), i);
  return p;
}

}  // namespace

TEST_CASE("greedy on identity picks lowest indices") {
  const auto sel = greedy_select(SymMatrix::identity(6), 3);
  CHECK(sel.selected == IndexSet{0, 1, 2});
  REQUIRE(sel.residual_trace.size() == 3);
  CHECK(sel.residual_trace.back() == doctest::Approx(3.0));
}

TEST_CASE("greedy on rank one explains everything with one pick") {
  Vector v(5);
  v << 1.0, -2.0, 0.5, 3.0, 1.5;
  const SymMatrix c = SymMatrix::from_dense(v * v.transpose());
  const auto sel = greedy_select(c, 3);
  CHECK(sel.residual_trace.front() < 1e-12 * c.trace());
  // Nothing left after the first pick: early stop with one index.
  CHECK(sel.early_stopped);
  CHECK(sel.selected.size() == 1);
}

TEST_CASE("greedy rejects k out of range") {
  CHECK_THROWS_AS(greedy_select(SymMatrix::identity(3), 0), Error);
  CHECK_THROWS_AS(greedy_select(SymMatrix::identity(3), 3), Error);
}

TEST_CASE("each greedy pick is the exhaustive per-step argmin of the residual trace") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const SymMatrix c = random_psd(8, rng);
    const auto sel = greedy_select(c, 3);
    IndexSet p;
    for (std::size_t step = 0; step < sel.picks.size(); ++step) {
      std::size_t best = 0;
      double best_t = 1e300;
      for (std::size_t i : complement(p, 8)) {
        const double t = residual_trace_direct(c, with(p, i));
        if (t < best_t) {
          best_t = t;
          best = i;
        }
      }
      CHECK(sel.picks[step] == best);
      p = with(p, sel.picks[step]);
      // Rank-1 residual updates agree with the Schur complement.
      CHECK(sel.residual_trace[step] == doctest::Approx(residual_trace_direct(c, p)).epsilon(1e-9));
    }
  }
}

TEST_CASE("greedy residual trajectory bounds") {
  std::mt19937_64 rng(103);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t dim = 3 + trial % 10;
    const SymMatrix c = random_psd(dim, rng, 1 + (trial * 7) % dim);
    const std::size_t k = 1 + trial % (dim - 1);
    const auto sel = greedy_select(c, k);
    const auto eig = sym_eig(c);
    double prev = c.trace();
    for (std::size_t s = 0; s < sel.residual_trace.size(); ++s) {
      const double t = sel.residual_trace[s];
      CHECK(t <= prev + 1e-10 * c.trace());
      CHECK(t >= -1e-10 * c.trace());
      CHECK(t >= c.trace() - eig.values.head(static_cast<Eigen::Index>(s + 1)).sum() - 1e-9 * c.trace());
      prev = t;
    }
  }
}

TEST_CASE("optimal_R simple cases") {
  const Matrix r0 = optimal_R(SymMatrix::diagonal({1.0, 2.0, 3.0}), {1});
  CHECK(r0.rows() == 2);
  CHECK(r0.cols() == 1);
  CHECK(r0.cwiseAbs().maxCoeff() == 0.0);

  SymMatrix ones(2);
  ones.set(0, 0, 1.0);
  ones.set(0, 1, 1.0);
  ones.set(1, 1, 1.0);
  const Matrix r1 = optimal_R(ones, {0});
  CHECK(r1(0, 0) == doctest::Approx(1.0).epsilon(1e-7));
}

TEST_CASE("optimal_R matches Monte-Carlo least squares") {
  std::mt19937_64 rng(107);
  const SymMatrix c = random_psd(6, rng);
  const IndexSet p{0, 3};
  const Matrix r = optimal_R(c, p);
  const Matrix x = sample_gaussian(c, 200000, 7);
  const Matrix fit = attnlr::testing::regress(attnlr::testing::take_cols(x, p),
                                              attnlr::testing::take_cols(x, complement(p, 6)));
  CHECK((fit - r).norm() / r.norm() < 0.01);
}

TEST_CASE("expected_mse identities and optimality") {
  std::mt19937_64 rng(109);
  for (int trial = 0; trial < 10; ++trial) {
    const SymMatrix c = random_psd(7, rng);
    const IndexSet p = attnlr::testing::random_subset(7, 1 + trial % 5, rng);
    const Matrix r = optimal_R(c, p);
    const double opt = expected_mse(c, p, r);
    CHECK(std::abs(opt - schur_complement(c, p).trace()) < 1e-10 * std::max(1.0, c.trace()));
    const Matrix zero = Matrix::Zero(r.rows(), r.cols());
    CHECK(expected_mse(c, p, zero) == doctest::Approx(c.principal(complement(p, 7)).trace()));
    for (int j = 0; j < 10; ++j) {
      const Matrix pert = r + attnlr::testing::random_matrix(r.rows(), r.cols(), rng, 0.05);
      CHECK(expected_mse(c, p, pert) >= opt);
    }
  }
  CHECK_THROWS_AS(expected_mse(SymMatrix::identity(3), {0}, Matrix::Zero(1, 1)), Error);
}

TEST_CASE("flops_ratio reproduces the per-query table values exactly") {
  const auto a = flops_ratio(128, 64, 16, PlanMode::PerQuery);
  CHECK(a.ratio == 0.375);
  CHECK(a.ratio_num == 3);
  CHECK(a.ratio_den == 8);
  CHECK(flops_ratio(128, 64, 24, PlanMode::PerQuery).ratio == 0.5625);
  CHECK(flops_ratio(128, 64, 32, PlanMode::PerQuery).ratio == 0.75);
  CHECK(flops_ratio(128, 64, 0, PlanMode::PerQuery).ratio == 0.0);
  const auto w = flops_ratio(8, 4, 10, PlanMode::WholeMatrix);
  CHECK(w.kbar == 10);
  CHECK(w.approx_flops == 10 * 4 + 10 * 64);
  CHECK(w.exact_flops == 256);
  CHECK_THROWS_AS(flops_ratio(8, 4, 9, PlanMode::PerQuery), Error);
}

TEST_CASE("reconstruct and assemble") {
  const Vector zero = reconstruct(Vector::Ones(2), Matrix::Zero(3, 2));
  CHECK(zero.cwiseAbs().maxCoeff() == 0.0);

  // Perfectly correlated scores: every estimate equals the observed value.
  const SymMatrix corr = SymMatrix::from_dense(Matrix::Ones(4, 4));
  const Matrix r = optimal_R(corr, {1});
  Vector ap(1);
  ap << 2.0;
  const Vector est = reconstruct(ap, r);
  for (Eigen::Index i = 0; i < est.size(); ++i) CHECK(est(i) == doctest::Approx(2.0).epsilon(1e-7));
  CHECK_THROWS_AS(reconstruct(Vector::Ones(3), r), Error);
}

TEST_CASE("gather then assemble restores order for random subsets") {
  std::mt19937_64 rng(113);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dim = 2 + trial % 20;
    const IndexSet p = attnlr::testing::random_subset(dim, 1 + trial % (dim - 1), rng);
    const Vector a = attnlr::testing::random_matrix(static_cast<Eigen::Index>(dim), 1, rng);
    const Vector back = assemble(p, gather(a, p), gather(a, complement(p, dim)), dim);
    CHECK(back == a);
  }
}

TEST_CASE("Monte-Carlo reconstruction error matches expected_mse") {
  std::mt19937_64 rng(127);
  const SymMatrix c = random_psd(6, rng);
  const IndexSet p{2, 5};
  const IndexSet rest = complement(p, 6);
  const Matrix r = optimal_R(c, p);
  const Matrix x = sample_gaussian(c, 100000, 3);
  double se = 0.0;
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    const Vector a = x.row(s).transpose();
    se += (gather(a, rest) - reconstruct(gather(a, p), r)).squaredNorm();
  }
  const double mc = se / static_cast<double>(x.rows());
  const double expect = expected_mse(c, p, r);
  CHECK(std::abs(mc - expect) / expect < 0.02);
}

TEST_CASE("eigen_project") {
  std::mt19937_64 rng(131);
  const SymMatrix c = random_psd(6, rng);
  const EigenBasis b = sym_eig(c);
  const Vector a = attnlr::testing::random_matrix(6, 1, rng);
  CHECK((eigen_project(a, b, 6) - a).cwiseAbs().maxCoeff() < 1e-12);
  const Vector orth = b.vectors.col(5);
  CHECK(eigen_project(orth, b, 3).cwiseAbs().maxCoeff() < 1e-12);
  // Residual equals the energy in coefficients beyond k.
  const Vector coef = b.vectors.transpose() * a;
  for (std::size_t k = 0; k <= 6; ++k) {
    const double resid = (a - eigen_project(a, b, k)).squaredNorm();
    const double tail = coef.tail(static_cast<Eigen::Index>(6 - k)).squaredNorm();
    CHECK(resid == doctest::Approx(tail).epsilon(1e-10));
  }
  CHECK_THROWS_AS(eigen_project(Vector::Ones(5), b, 2), Error);
}

TEST_CASE("whole-matrix plan warm-started from per-query picks beats per-query plans at equal kbar") {
  std::mt19937_64 rng(137);
  const std::size_t n = 4;
  const std::size_t k = 2;
  const SymMatrix c = random_psd(n * n, rng, 10);
  std::vector<SymMatrix> blocks;
  for (std::size_t i = 0; i < n; ++i) {
    IndexSet idx;
    for (std::size_t j = 0; j < n; ++j) idx.push_back(i * n + j);
    blocks.push_back(c.principal(idx));
  }
  const PartialPlan pq = plan_per_query(blocks, k);
  IndexSet warm;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j : pq.rows[i].indices) warm.push_back(i * n + j);
  }
  std::sort(warm.begin(), warm.end());
  const auto whole = greedy_select(c, n * k, warm);
  CHECK(whole.residual_trace.back() <= pq.total_residual() + 1e-9 * c.trace());
}

TEST_CASE("plan files round-trip") {
  std::mt19937_64 rng(139);
  std::vector<SymMatrix> blocks;
  for (int i = 0; i < 5; ++i) blocks.push_back(random_psd(5, rng));
  PartialPlan plan = plan_per_query(blocks, 2);
  plan.source_covariance = "cov-test";
  const auto dir = std::filesystem::temp_directory_path() / "attnlr_plan_test";
  std::filesystem::remove_all(dir);
  std::vector<std::filesystem::path> written;
  save_plan(dir / "plan_k2.json", plan, &written);
  CHECK(written.size() == 6);
  const PartialPlan back = load_plan(dir / "plan_k2.json");
  CHECK(back.mode == PlanMode::PerQuery);
  CHECK(back.k == 2);
  CHECK(back.source_covariance == "cov-test");
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(back.rows[i].indices == plan.rows[i].indices);
    CHECK(back.rows[i].r == plan.rows[i].r);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("per-query plan pads early-stopped rows to k") {
  std::vector<SymMatrix> blocks(3, SymMatrix(3));
  const PartialPlan plan = plan_per_query(blocks, 2);
  for (const auto& row : plan.rows) {
    CHECK(row.indices == IndexSet{0, 1});
    CHECK(row.residual_trace == 0.0);
  }
}
