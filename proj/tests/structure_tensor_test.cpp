#include <gtest/gtest.h>

#include <numbers>

#include "cst/structure_tensor.hpp"
#include "oracles.hpp"

using namespace cst;

namespace {

GrayImage ramp_along_columns(std::size_t rows, std::size_t cols) {
  Raster<Pixel> px(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) px(r, c) = static_cast<Pixel>(c);
  return GrayImage(px);
}

GradientField field(std::size_t k, RealRaster values) { return {k, std::move(values)}; }

}  // namespace

TEST(Orientations, AnglesAreEvenlySpaced) {
  const OrientationSet set(6);
  ASSERT_EQ(set.size(), 6u);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(set[k], 2.0 * std::numbers::pi * (k + 1) / 6.0, 1e-12);
  for (std::size_t k = 1; k < 6; ++k) EXPECT_GT(set[k], set[k - 1]);
  EXPECT_THROW(OrientationSet(1), ConfigError);
}

TEST(Window, NormalizedAndSymmetric) {
  const GaussianWindow w(1.3, 7, 5);
  double sum = 0.0;
  for (std::ptrdiff_t dy = -2; dy <= 2; ++dy)
    for (std::ptrdiff_t dx = -3; dx <= 3; ++dx) {
      sum += w.weight(dy, dx);
      EXPECT_DOUBLE_EQ(w.weight(dy, dx), w.weight(-dy, -dx));
    }
  EXPECT_NEAR(sum, 1.0, 1e-9);
  EXPECT_THROW(GaussianWindow(1.0, 4, 5), ConfigError);
  EXPECT_THROW(GaussianWindow(0.0, 5, 5), ConfigError);
}

TEST(Gradients, ConstantImageHasNone) {
  const auto fields = directional_gradients(GrayImage(6, 6, 256, 40), OrientationSet(4));
  for (const auto& f : fields)
    for (double v : f.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gradients, RampAlongColumns) {
  const auto fields = directional_gradients(ramp_along_columns(8, 8), OrientationSet(4));
  // Orientation pi/2 steers onto the column derivative, pi onto the negated row derivative.
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_NEAR(fields[0].values(r, c), 1.0, 1e-12);
      EXPECT_NEAR(fields[1].values(r, c), 0.0, 1e-12);
    }
}

TEST(Gradients, MatchFiniteDifferenceOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const auto img = oracle::random_image(rng, 8, 8);
    const OrientationSet set(3 + trial % 5);
    const auto fields = directional_gradients(img, set);
    for (std::size_t k = 0; k < set.size(); ++k)
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c)
          EXPECT_NEAR(fields[k].values(r, c), oracle::directional_derivative(img, set[k], r, c), 1e-12);
  }
}

TEST(Gradients, AreLinear) {
  Rng rng(2);
  const auto a = oracle::random_image(rng, 9, 11, 100), b = oracle::random_image(rng, 9, 11, 100);
  Raster<Pixel> mix(9, 11);
  for (std::size_t i = 0; i < mix.size(); ++i) mix.data()[i] = static_cast<Pixel>(2 * a.pixels().data()[i] + b.pixels().data()[i]);
  const OrientationSet set(4);
  const auto ga = directional_gradients(a, set), gb = directional_gradients(b, set), gm = directional_gradients(GrayImage(mix, 301), set);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t i = 0; i < mix.size(); ++i)
      EXPECT_NEAR(gm[k].values.data()[i], 2 * ga[k].values.data()[i] + gb[k].values.data()[i], 1e-9);
}

TEST(TensorMap, ZeroFieldsGiveZeroMap) {
  const auto m = tensor_map(field(0, RealRaster(6, 6, 0.0)), field(1, RealRaster(6, 6, 0.0)), GaussianWindow(1.0, 3, 3));
  for (double v : m.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(TensorMap, UnitWindowIsPointwiseProduct) {
  Rng rng(6);
  const auto a = oracle::random_matrix(rng, 5, 7), b = oracle::random_matrix(rng, 5, 7);
  const auto m = tensor_map(field(0, a), field(1, b), GaussianWindow(1.0, 1, 1));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(m.values.data()[i], a.data()[i] * b.data()[i], 1e-15);
}

TEST(TensorMap, MatchesDirectConvolution) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = oracle::random_matrix(rng, 8, 8), b = oracle::random_matrix(rng, 8, 8);
    const GaussianWindow w(0.7 + 0.3 * trial, 3, trial % 2 ? 5 : 3);
    const auto m = tensor_map(field(0, a), field(2, b), w);
    const auto expected = oracle::windowed_product(a, b, w);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(m.values.data()[i], expected.data()[i], 1e-9);
    EXPECT_EQ(m.i, 0u);
    EXPECT_EQ(m.j, 2u);
  }
}

TEST(TensorMap, SelfProductIsNonnegative) {
  Rng rng(8);
  const auto a = oracle::random_matrix(rng, 10, 10);
  const auto m = tensor_map(field(0, a), field(0, a), GaussianWindow());
  for (double v : m.values.data()) EXPECT_GE(v, 0.0);
}

TEST(TensorMap, WindowLargerThanImage) {
  EXPECT_THROW(tensor_map(field(0, RealRaster(3, 3)), field(0, RealRaster(3, 3)), GaussianWindow(1.0, 5, 5)), ConfigError);
  EXPECT_THROW(tensor_map(field(0, RealRaster(3, 3)), field(0, RealRaster(3, 4)), GaussianWindow(1.0, 1, 1)), DimensionError);
}

TEST(Cascade, CountAndSymmetry) {
  Rng rng(10);
  const auto img = oracle::random_image(rng, 12, 12);
  EXPECT_EQ(build_cascade(img, OrientationSet(2), GaussianWindow()).maps.size(), 4u);
  const auto cascade = build_cascade(img, OrientationSet(4), GaussianWindow());
  ASSERT_EQ(cascade.maps.size(), 16u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(cascade.at(i, j).i, i);
      EXPECT_EQ(cascade.at(i, j).j, j);
      EXPECT_EQ(cascade.at(i, j).values, cascade.at(j, i).values);
    }
}

TEST(Cascade, MapsMatchRecomputation) {
  Rng rng(13);
  const auto img = oracle::random_image(rng, 16, 20);
  const OrientationSet set(4);
  const GaussianWindow w(1.0, 5, 5);
  const auto cascade = build_cascade(img, set, w);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      RealRaster gi(16, 20), gj(16, 20);
      for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 20; ++c) {
          gi(r, c) = oracle::directional_derivative(img, set[i], r, c);
          gj(r, c) = oracle::directional_derivative(img, set[j], r, c);
        }
      const auto expected = oracle::windowed_product(gi, gj, w);
      for (std::size_t p = 0; p < expected.size(); ++p)
        EXPECT_NEAR(cascade.at(i, j).values.data()[p], expected.data()[p], 1e-8);
    }
}

TEST(Coherence, NonzeroMapBeatsZeroMap) {
  TensorCascade cascade{2, {}};
  for (std::size_t k = 0; k < 4; ++k) cascade.maps.push_back({k / 2, k % 2, RealRaster(3, 3, 0.0)});
  cascade.maps[2].values(1, 1) = 0.5;
  EXPECT_EQ(select_coherent_index(cascade).index, 2u);
  EXPECT_EQ(&select_coherent(cascade), &cascade.maps[2]);
}

TEST(Coherence, IdenticalMapsPickFirst) {
  Rng rng(14);
  const auto m = oracle::random_matrix(rng, 5, 5);
  TensorCascade cascade{3, {}};
  for (std::size_t k = 0; k < 9; ++k) cascade.maps.push_back({k / 3, k % 3, m});
  EXPECT_EQ(select_coherent_index(cascade).index, 0u);
}

TEST(Coherence, AgreesWithExhaustiveArgmax) {
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    TensorCascade cascade{3, {}};
    for (std::size_t k = 0; k < 9; ++k) cascade.maps.push_back({k / 3, k % 3, oracle::random_matrix(rng, 6, 8)});
    std::size_t best = 0;
    double best_value = -1.0;
    for (std::size_t k = 0; k < 9; ++k) {
      const double v = std::sqrt(oracle::gram_eigenvalues(cascade.maps[k].values)[0]);
      if (v > best_value) best_value = v, best = k;
    }
    const auto choice = select_coherent_index(cascade);
    EXPECT_EQ(choice.index, best);
    EXPECT_NEAR(choice.strength, best_value, 1e-9 * best_value);
  }
}

TEST(Coherence, ScalingAllMapsKeepsChoice) {
  Rng rng(16);
  const auto img = oracle::random_image(rng, 24, 24);
  const auto cascade = build_cascade(img, OrientationSet(4), GaussianWindow());
  auto scaled = cascade;
  for (auto& m : scaled.maps)
    for (auto& v : m.values.data()) v *= 7.25;
  EXPECT_EQ(select_coherent_index(cascade).index, select_coherent_index(scaled).index);
}
