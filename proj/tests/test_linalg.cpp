#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apex/error.hpp"
#include "apex/linalg.hpp"
#include "oracles.hpp"

using apex::Matrix;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST(MatExp, ZeroIsIdentity) {
  EXPECT_EQ(apex::mat_exp(Matrix(5, 5)), Matrix::identity(5));
}

TEST(MatExp, DiagonalMatchesScalarExp) {
  const std::vector<double> d = {-3.0, 0.0, 0.5, 2.0, 7.5};
  const Matrix e = apex::mat_exp(Matrix::diagonal(d));
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(e(i, i), std::exp(d[i]), 1e-12 * std::exp(d[i]));
}

TEST(MatExp, NilpotentBlockClosedForm) {
  Matrix a(2, 2);
  a(0, 1) = 3.0;
  const Matrix e = apex::mat_exp(a);
  EXPECT_DOUBLE_EQ(e(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(e(0, 1), 3.0);
  EXPECT_DOUBLE_EQ(e(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(e(1, 1), 1.0);
}

TEST(MatExp, RotationGenerator) {
  const double th = 1.3;
  Matrix a(2, 2);
  a(0, 1) = -th;
  a(1, 0) = th;
  const Matrix e = apex::mat_exp(a);
  EXPECT_NEAR(e(0, 0), std::cos(th), 1e-14);
  EXPECT_NEAR(e(1, 0), std::sin(th), 1e-14);
}

TEST(MatExp, MatchesTaylorOracleForSmallNorm) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t d = 1 + trial % 12;
    Matrix a = oracle::random_matrix(d, d, 1.0, rng);
    a *= 1.0 / std::max(apex::one_norm(a), 1e-12);
    EXPECT_LT(max_abs_diff(apex::mat_exp(a), oracle::taylor_exp(a)), 1e-12);
  }
}

TEST(MatExp, InverseViaNegation) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 2 + trial % 15;
    const Matrix a = oracle::random_matrix(d, d, 0.8, rng);
    const Matrix r = apex::mat_exp(a) * apex::mat_inverse_via_exp(a) - Matrix::identity(d);
    EXPECT_LE(apex::frobenius_norm(r), 1e-10 * static_cast<double>(d));
  }
}

TEST(MatExp, RejectsNonFinite) {
  Matrix a(2, 2);
  a(0, 0) = NAN;
  EXPECT_THROW(apex::mat_exp(a), apex::NumericError);
  Matrix big(2, 2);
  big(0, 0) = 1e300;
  EXPECT_THROW(apex::mat_exp(big), apex::NumericError);
}

TEST(MatExp, RejectsNonSquare) {
  EXPECT_THROW(apex::mat_exp(Matrix(2, 3)), apex::ShapeError);
}

TEST(MatExpVjp, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + trial % 6;
    const Matrix a = oracle::random_matrix(d, d, 0.5, rng);
    const Matrix c = oracle::random_matrix(d, d, 1.0, rng);
    const Matrix g = apex::mat_exp_vjp(a, c);
    const Matrix fd = oracle::fd_exp_gradient(a, c);
    EXPECT_LE(apex::frobenius_norm(g - fd), 1e-6 * std::max(1.0, apex::frobenius_norm(fd)));
  }
}

TEST(MatExpVjp, AtZeroIsCotangent) {
  std::mt19937_64 rng(9);
  const Matrix c = oracle::random_matrix(4, 4, 1.0, rng);
  EXPECT_LT(max_abs_diff(apex::mat_exp_vjp(Matrix(4, 4), c), c), 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto st = apex::AdamState::for_shape(1, 2, 0.1, 0.9, 0.999, 0.0);
  Matrix p(1, 2);
  Matrix g(1, 2);
  g(0, 0) = 5.0;
  g(0, 1) = -0.01;
  const Matrix next = apex::adam_step(p, g, st);
  EXPECT_NEAR(next(0, 0), -0.1, 1e-8);
  EXPECT_NEAR(next(0, 1), 0.1, 1e-5);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, DecoupledWeightDecayWithZeroGradient) {
  auto st = apex::AdamState::for_shape(1, 1, 0.5, 0.9, 0.999, 0.1);
  Matrix p(1, 1, 2.0);
  const Matrix next = apex::adam_step(p, Matrix(1, 1), st);
  EXPECT_NEAR(next(0, 0), 2.0 - 0.5 * 0.1 * 2.0, 1e-12);
}

TEST(Adam, MinimizesQuadratic) {
  auto st = apex::AdamState::for_shape(1, 1, 0.05, 0.9, 0.999, 0.0);
  Matrix p(1, 1, 3.0);
  for (int i = 0; i < 2000; ++i) {
    Matrix g(1, 1, 2.0 * (p(0, 0) - 1.0));
    p = apex::adam_step(p, g, st);
  }
  EXPECT_NEAR(p(0, 0), 1.0, 1e-3);
}

TEST(Matrix, ProductAndTranspose) {
  Matrix a(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  Matrix b = a.transposed();
  const Matrix c = a * b;
  EXPECT_EQ(c, Matrix(2, 2, std::vector<double>{14, 32, 32, 77}));
  EXPECT_THROW(a * a, apex::ShapeError);
}
