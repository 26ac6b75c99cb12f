#include <cmath>
#include <random>

#include "attnlr/error.hpp"
#include "attnlr/numerics.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace attnlr;
using attnlr::testing::random_psd;

TEST_CASE("sym_eig identity and diagonal") {
  const auto id = sym_eig(SymMatrix::identity(2));
  CHECK(id.values(0) == doctest::Approx(1.0));
  CHECK(id.values(1) == doctest::Approx(1.0));
  CHECK((id.vectors.transpose() * id.vectors - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);

  const auto d = sym_eig(SymMatrix::diagonal({1.0, 3.0}));
  CHECK(d.values(0) == doctest::Approx(3.0));
  CHECK(d.values(1) == doctest::Approx(1.0));
  // sign normalization: largest-magnitude entry positive
  CHECK(d.vectors(1, 0) == doctest::Approx(1.0));
  CHECK(d.vectors(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("sym_eig reconstructs a random PSD matrix") {
  std::mt19937_64 rng(7);
  const SymMatrix m = random_psd(8, rng);
  const EigenBasis e = sym_eig(m);
  const Matrix rec = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
  CHECK((rec - m.dense()).cwiseAbs().maxCoeff() < 1e-10);
  for (Eigen::Index i = 1; i < e.values.size(); ++i) CHECK(e.values(i) <= e.values(i - 1));
  CHECK((e.vectors.transpose() * e.vectors - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-8);
  for (Eigen::Index c = 0; c < 8; ++c) {
    Eigen::Index arg;
    e.vectors.col(c).cwiseAbs().maxCoeff(&arg);
    CHECK(e.vectors(arg, c) > 0.0);
  }
}

TEST_CASE("sym_eig is deterministic and rejects non-finite input") {
  std::mt19937_64 rng(3);
  const SymMatrix m = random_psd(10, rng);
  const auto a = sym_eig(m);
  const auto b = sym_eig(m);
  CHECK(a.values == b.values);
  CHECK(a.vectors == b.vectors);

  SymMatrix bad(2);
  bad.set(0, 1, std::nan(""));
  CHECK_THROWS_AS(sym_eig(bad), Error);
}

TEST_CASE("PSD eigenvalues are not meaningfully negative") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const SymMatrix m = random_psd(12, rng, 1 + trial % 12);
    const auto e = sym_eig(m);
    CHECK(e.values.minCoeff() >= -1e-8 * e.values(0));
  }
}

TEST_CASE("solve_psd") {
  Matrix rhs(2, 1);
  rhs << 5, 7;
  const Matrix x = solve_psd(SymMatrix::identity(2), rhs);
  CHECK(x(0, 0) == doctest::Approx(5.0).epsilon(1e-7));
  CHECK(x(1, 0) == doctest::Approx(7.0).epsilon(1e-7));

  Matrix rhs2(2, 1);
  rhs2 << 2, 4;
  const Matrix y = solve_psd(SymMatrix::diagonal({2.0, 4.0}), rhs2);
  CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(y(1, 0) == doctest::Approx(1.0).epsilon(1e-7));

  std::mt19937_64 rng(5);
  // Wishart with 12 degrees of freedom: full rank, moderately conditioned.
  const SymMatrix m = random_psd(6, rng, 12);
  const Matrix b = attnlr::testing::random_matrix(6, 3, rng);
  const Matrix z = solve_psd(m, b);
  CHECK((m.dense() * z - b).norm() / b.norm() < 1e-6);
  Matrix ridged = m.dense();
  ridged.diagonal().array() += relative_ridge(m);
  CHECK((ridged * z - b).norm() / b.norm() < 1e-8);
}

TEST_CASE("solve_psd reports the ridge on failure") {
  SymMatrix m(2);
  m.set(0, 0, 1.0);
  m.set(1, 1, -1.0);
  try {
    solve_psd(m, Matrix::Ones(2, 1));
    FAIL("expected singularity error");
  } catch (const SingularMatrixError& e) {
    CHECK(e.category() == ErrorCategory::Singular);
    CHECK(e.ridge() == doctest::Approx(0.0));
  }
}

TEST_CASE("schur_complement simple cases") {
  const SymMatrix s = schur_complement(SymMatrix::identity(3), {0});
  CHECK(s.dim() == 2);
  CHECK((s.dense() - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);

  SymMatrix ones(2);
  ones.set(0, 0, 1.0);
  ones.set(0, 1, 1.0);
  ones.set(1, 1, 1.0);
  const SymMatrix r = schur_complement(ones, {0});
  CHECK(std::abs(r(0, 0)) < 1e-7);

  CHECK_THROWS_AS(schur_complement(ones, {}), Error);
  CHECK_THROWS_AS(schur_complement(ones, {0, 1}), Error);
  CHECK_THROWS_AS(schur_complement(ones, {1, 0}), Error);
}

TEST_CASE("schur_complement trace matches Monte-Carlo regression residual") {
  std::mt19937_64 rng(17);
  const SymMatrix m = random_psd(6, rng);
  const IndexSet p{1, 4};
  const IndexSet rest = complement(p, 6);
  const double schur_trace = schur_complement(m, p).trace();

  const Matrix x = sample_gaussian(m, 200000, 99);
  const Matrix xp = attnlr::testing::take_cols(x, p);
  const Matrix xr = attnlr::testing::take_cols(x, rest);
  const Matrix coef = attnlr::testing::regress(xp, xr);
  const Matrix resid = xr - xp * coef.transpose();
  const double mc = resid.squaredNorm() / static_cast<double>(x.rows());
  CHECK(std::abs(mc - schur_trace) / schur_trace < 0.02);
}

TEST_CASE("schur trace bounded by the P-bar diagonal block and monotone in P") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t dim = 4 + trial % 9;
    const SymMatrix m = random_psd(dim, rng, 1 + trial % dim);
    std::vector<std::size_t> order(dim);
    for (std::size_t i = 0; i < dim; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double prev = m.trace();
    // Nested chain P1 ⊂ P2 ⊂ ...; residual trace over the whole vector.
    for (std::size_t size = 1; size < dim; ++size) {
      IndexSet p(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(size));
      std::sort(p.begin(), p.end());
      const double t = schur_complement(m, p).trace();
      const double block = m.principal(complement(p, dim)).trace();
      CHECK(t <= block + 1e-9 * m.trace());
      CHECK(t <= prev + 1e-9 * m.trace());
      prev = t;
    }
  }
}

TEST_CASE("sample_gaussian") {
  const Matrix x = sample_gaussian(SymMatrix::identity(2), 100000, 1);
  const Matrix emp = x.transpose() * x / static_cast<double>(x.rows());
  CHECK((emp - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 0.05);

  const Matrix z = sample_gaussian(SymMatrix(3), 50, 2);
  CHECK(z.cwiseAbs().maxCoeff() == 0.0);

  const Matrix a = sample_gaussian(SymMatrix::identity(3), 100, 42);
  const Matrix b = sample_gaussian(SymMatrix::identity(3), 100, 42);
  CHECK(a == b);

  SymMatrix bad = SymMatrix::diagonal({1.0, -1.0});
  CHECK_THROWS_AS(sample_gaussian(bad, 10, 1), Error);
}

TEST_CASE("sampled second moment converges to cov at 3 sigma") {
  std::mt19937_64 rng(29);
  const SymMatrix c = random_psd(5, rng);
  const std::size_t count = 50000;
  const Matrix x = sample_gaussian(c, count, 5);
  const Matrix emp = x.transpose() * x / static_cast<double>(count);
  // Var of x_i x_j for Gaussian: C_ii C_jj + C_ij^2.
  for (Eigen::Index i = 0; i < 5; ++i) {
    for (Eigen::Index j = 0; j < 5; ++j) {
      const double sd = std::sqrt((c(i, i) * c(j, j) + c(i, j) * c(i, j)) / static_cast<double>(count));
      CHECK(std::abs(emp(i, j) - c(i, j)) <= 3.5 * sd);
    }
  }
}
