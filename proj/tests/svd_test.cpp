#include <gtest/gtest.h>

#include <limits>

#include "cst/structure_tensor.hpp"
#include "cst/svd.hpp"
#include "oracles.hpp"

using namespace cst;

namespace {

RealRaster matrix(std::size_t rows, std::size_t cols, std::vector<double> v) { return RealRaster(rows, cols, std::move(v)); }

RealRaster transposed(const RealRaster& a) {
  RealRaster t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

}  // namespace

TEST(Svd, Identity) {
  const auto s = jacobi_singular_values(matrix(2, 2, {1, 0, 0, 1}));
  ASSERT_EQ(s.size(), 2u);
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 1.0, 1e-12);
}

TEST(Svd, DiagonalIsSorted) {
  const auto s = jacobi_singular_values(matrix(2, 2, {3, 0, 0, 4}));
  EXPECT_NEAR(s[0], 4.0, 1e-12);
  EXPECT_NEAR(s[1], 3.0, 1e-12);
}

TEST(Svd, ThreeByThreeMatchesCharacteristicPolynomial) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = oracle::random_matrix(rng, 3, 3);
    const auto s = jacobi_singular_values(a);
    const auto roots = oracle::characteristic_roots_3x3(a);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(s[k] * s[k], roots[k], 1e-8 * std::max(1.0, roots[0]));
  }
}

TEST(Svd, SquaredValuesAreGramEigenvalues) {
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t rows = 2 + rng.below(15), cols = 2 + rng.below(15);
    const auto a = oracle::random_matrix(rng, rows, cols);
    const auto s = jacobi_singular_values(a);
    const auto ev = oracle::gram_eigenvalues(a);
    ASSERT_EQ(s.size(), std::min(rows, cols));
    for (std::size_t k = 0; k < s.size(); ++k) EXPECT_NEAR(s[k] * s[k], ev[k], 1e-8 * std::max(1.0, ev[0]));
    for (std::size_t k = 1; k < s.size(); ++k) EXPECT_LE(s[k], s[k - 1]);
    for (double v : s) EXPECT_GE(v, 0.0);
  }
}

TEST(Svd, TransposeAndScaleInvariance) {
  Rng rng(9);
  const auto a = oracle::random_matrix(rng, 7, 4);
  const auto s = jacobi_singular_values(a);
  const auto st = jacobi_singular_values(transposed(a));
  RealRaster scaled = a;
  for (auto& x : scaled.data()) x *= 3.5;
  const auto ss = jacobi_singular_values(scaled);
  for (std::size_t k = 0; k < s.size(); ++k) {
    EXPECT_NEAR(s[k], st[k], 1e-12 * s[0]);
    EXPECT_NEAR(ss[k], 3.5 * s[k], 1e-9 * ss[0]);
  }
}

TEST(Svd, RankDeficientAndZero) {
  const auto s = jacobi_singular_values(matrix(2, 3, {1, 2, 3, 2, 4, 6}));
  EXPECT_NEAR(s[0], std::sqrt(70.0), 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
  const auto z = jacobi_singular_values(RealRaster(4, 4, 0.0));
  for (double v : z) EXPECT_EQ(v, 0.0);
}

TEST(Svd, NonFiniteEntries) {
  EXPECT_THROW(jacobi_singular_values(matrix(1, 2, {1.0, std::numeric_limits<double>::quiet_NaN()})), NumericError);
  EXPECT_THROW(top_singular_value(matrix(1, 2, {std::numeric_limits<double>::infinity(), 0.0})), NumericError);
}

TEST(Svd, LanczosTopValueMatchesJacobi) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t rows = 1 + rng.below(40), cols = 1 + rng.below(40);
    const auto a = oracle::random_matrix(rng, rows, cols);
    EXPECT_NEAR(top_singular_value(a), jacobi_singular_values(a)[0], 1e-9 * std::max(1.0, jacobi_singular_values(a)[0]));
  }
}

TEST(Svd, SpectrumOfTensorMap) {
  TensorMap map{0, 1, matrix(2, 3, {0, 0, 2, 0, 5, 0})};
  const auto spec = singular_values(map);
  EXPECT_EQ(spec.rows, 2u);
  EXPECT_EQ(spec.cols, 3u);
  EXPECT_NEAR(spec.largest(), 5.0, 1e-12);
  EXPECT_NEAR(spec.values[1], 2.0, 1e-12);
}
