#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qlab/ndkernel.hpp"
#include "test_support.hpp"

namespace qlab::nd {
namespace {

using testing::random_matrix;

// Triple loop, used as the oracle for the blocked kernels.
Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double acc = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(acc);
    }
  }
  return c;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 rng(1);
  const Matrix a = random_matrix(3, 5, rng);
  EXPECT_EQ(matmul(Matrix::identity(3), a), a);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{5}, {6}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{17}, {39}}));
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ContractViolation);
}

TEST(Matmul, MatchesNaiveProductOnOddShapes) {
  std::mt19937_64 rng(7);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {7, 13, 5}, {33, 70, 65}, {128, 3, 9}}) {
    const Matrix a = random_matrix(m, k, rng);
    const Matrix b = random_matrix(k, n, rng);
    EXPECT_LT(max_abs_diff(matmul(a, b), naive_product(a, b)), 1e-12 * k) << m << "x" << k << "x" << n;
  }
}

TEST(Matmul, TransposedVariantsAgree) {
  std::mt19937_64 rng(3);
  const Matrix a = random_matrix(17, 11, rng);
  const Matrix b = random_matrix(9, 11, rng);
  const Matrix c = random_matrix(17, 6, rng);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b), naive_product(a, transpose(b))), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_tn(a, c), naive_product(transpose(a), c)), 1e-12);
}

TEST(Gemm, AlphaBetaAndStridedViews) {
  std::mt19937_64 rng(5);
  const Matrix a = random_matrix(6, 8, rng);
  const Matrix b = random_matrix(8, 4, rng);
  Matrix c = random_matrix(10, 10, rng);
  const Matrix c0 = c;
  View<double> window = View<double>(c).block(2, 3, 6, 4);
  gemm<double>(Trans::kNo, Trans::kNo, 2.0, a, b, 0.5, window);
  const Matrix ab = naive_product(a, b);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 10; ++j) {
      const bool inside = i >= 2 && i < 8 && j >= 3 && j < 7;
      const double want = inside ? 2.0 * ab(i - 2, j - 3) + 0.5 * c0(i, j) : c0(i, j);
      EXPECT_NEAR(c(i, j), want, 1e-12);
    }
  }
}

TEST(Gemm, FloatMatchesDoubleWithinRounding) {
  std::mt19937_64 rng(9);
  const Matrix a = random_matrix(20, 40, rng);
  const Matrix b = random_matrix(40, 12, rng);
  const MatrixF cf = matmul(a.cast<float>(), b.cast<float>());
  EXPECT_LT(max_abs_diff(cf.cast<double>(), naive_product(a, b)), 1e-4);
}

TEST(Cholesky, IdentityFactorsToIdentity) {
  EXPECT_EQ(cholesky(Matrix::identity(4)), Matrix::identity(4));
}

TEST(Cholesky, TwoByTwoReconstructs) {
  const Matrix h = Matrix::from_rows({{4, 2}, {2, 3}});
  const Matrix l = cholesky(h);
  EXPECT_DOUBLE_EQ(l(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(l(1, 0), 1.0);
  EXPECT_NEAR(l(1, 1), std::sqrt(2.0), 1e-15);
  EXPECT_LT(max_abs_diff(matmul_nt(l, l), h), 1e-14);
}

TEST(Cholesky, IndefiniteReportsPivot) {
  try {
    cholesky(Matrix::from_rows({{1, 2}, {2, 1}}));
    FAIL() << "expected FactorizationError";
  } catch (const FactorizationError& e) {
    EXPECT_EQ(e.pivot(), 1u);
  }
}

TEST(Cholesky, UpperFactorOfRandomSpd) {
  std::mt19937_64 rng(11);
  const Matrix x = random_matrix(40, 12, rng);
  const Matrix h = matmul_tn(x, x);
  const Matrix u = cholesky_upper(h);
  for (std::size_t i = 0; i < u.rows(); ++i) {
    EXPECT_GT(u(i, i), 0.0);
    for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(u(i, j), 0.0);
  }
  EXPECT_LT(max_abs_diff(matmul_tn(u, u), h), 1e-10);
}

TEST(SolveSpd, IdentityAndDiagonal) {
  std::mt19937_64 rng(13);
  const Matrix b = random_matrix(3, 2, rng);
  EXPECT_LT(max_abs_diff(solve_spd(Matrix::identity(3), b), b), 1e-15);
  const Matrix x = solve_spd(Matrix::from_rows({{4, 0}, {0, 9}}), Matrix::from_rows({{8}, {27}}));
  EXPECT_NEAR(x(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(x(1, 0), 3.0, 1e-15);
}

TEST(SolveSpd, RelativeResidualIsSmall) {
  std::mt19937_64 rng(17);
  const Matrix x = random_matrix(64, 24, rng);
  Matrix h = matmul_tn(x, x);
  for (std::size_t i = 0; i < h.rows(); ++i) h(i, i) += 0.1;
  const Matrix b = random_matrix(24, 3, rng);
  const Matrix sol = solve_spd(h, b);
  const Matrix residual = subtract(matmul(h, sol), b);
  EXPECT_LT(frobenius_norm(residual) / frobenius_norm(b), 1e-8);
}

// 3x3 inverse through the adjugate, independent of any factorization.
TEST(SpdInverse, MatchesAdjugateFormula) {
  const Matrix h = Matrix::from_rows({{4, 1, 0.5}, {1, 3, 0.2}, {0.5, 0.2, 2}});
  auto m = [&](int i, int j) { return h(i, j); };
  const double det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
                     m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
                     m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
  Matrix adj(3, 3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
      adj(i, j) = m(r0, c0) * m(r1, c1) - m(r0, c1) * m(r1, c0);
    }
  }
  EXPECT_LT(max_abs_diff(spd_inverse(h), scale(adj, 1.0 / det)), 1e-14);
}

TEST(Norms, FrobeniusExamples) {
  EXPECT_EQ(frobenius_norm(Matrix(3, 3)), 0.0);
  EXPECT_EQ(frobenius_norm(Matrix::from_rows({{3, 4}})), 5.0);
}

TEST(Matrix, RejectsWrongDataLength) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), ContractViolation);
  EXPECT_THROW(Matrix::from_rows({{1, 2}, {3}}), ContractViolation);
}

}  // namespace
}  // namespace qlab::nd
