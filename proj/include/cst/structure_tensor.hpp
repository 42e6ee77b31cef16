#pragma once

// Directional gradients, Gaussian-windowed tensor maps, the N x N tensor
// cascade, and selection of its most coherent member.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cst/error.hpp"
#include "cst/image.hpp"
#include "cst/raster.hpp"
#include "cst/svd.hpp"

namespace cst {

/// Angles 2*pi*k/n for k = 1..n.
class OrientationSet {
 public:
  explicit OrientationSet(std::size_t n = 4) : n_(n) {
    if (n < 2) throw ConfigError("at least two orientations are required");
    for (std::size_t k = 1; k <= n; ++k)
      angles_.push_back(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
  }
  std::size_t size() const { return n_; }
  const std::vector<double>& angles() const { return angles_; }
  double operator[](std::size_t i) const { return angles_[i]; }

 private:
  std::size_t n_;
  std::vector<double> angles_;
};

struct GradientField {
  std::size_t orientation_index = 0;  // 0-based index into the OrientationSet
  RealRaster values;
};

/// Normalized separable Gaussian kernel of odd size width x height.
class GaussianWindow {
 public:
  GaussianWindow(double sigma = 1.0, std::size_t width = 5, std::size_t height = 5)
      : sigma_(sigma), width_(width), height_(height) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("window sigma must be positive");
    if (width % 2 == 0 || height % 2 == 0 || width == 0 || height == 0)
      throw ConfigError("window dimensions must be odd and positive");
    horizontal_ = taps(width);
    vertical_ = taps(height);
  }

  double sigma() const { return sigma_; }
  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  const std::vector<double>& horizontal() const { return horizontal_; }
  const std::vector<double>& vertical() const { return vertical_; }

  /// Full 2-D weight at offset (dy, dx) from the center.
  double weight(std::ptrdiff_t dy, std::ptrdiff_t dx) const {
    return vertical_[dy + static_cast<std::ptrdiff_t>(height_ / 2)] *
           horizontal_[dx + static_cast<std::ptrdiff_t>(width_ / 2)];
  }

  GaussianWindow with_sigma(double sigma) const { return GaussianWindow(sigma, width_, height_); }

 private:
  std::vector<double> taps(std::size_t size) const {
    std::vector<double> w(size);
    const auto half = static_cast<std::ptrdiff_t>(size / 2);
    double sum = 0.0;
    for (std::ptrdiff_t i = -half; i <= half; ++i) {
      w[i + half] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma_ * sigma_));
      sum += w[i + half];
    }
    for (double& x : w) x /= sum;
    return w;
  }

  double sigma_;
  std::size_t width_, height_;
  std::vector<double> horizontal_, vertical_;
};

struct TensorMap {
  std::size_t i = 0;  // 0-based orientation indices
  std::size_t j = 0;
  RealRaster values;
};

struct TensorCascade {
  std::size_t n = 0;
  std::vector<TensorMap> maps;  // row-major n x n

  const TensorMap& at(std::size_t i, std::size_t j) const { return maps[i * n + j]; }
};

struct SingularSpectrum {
  std::vector<double> values;  // nonincreasing
  std::size_t rows = 0, cols = 0;

  double largest() const { return values.empty() ? 0.0 : values.front(); }
};

/// Partial derivatives along rows (du) and columns (dv): central differences
/// in the interior, one-sided differences on the border, 0 along an axis of
/// length 1.
inline std::pair<RealRaster, RealRaster> image_partials(const GrayImage& img) {
  const std::size_t rows = img.rows(), cols = img.cols();
  RealRaster du(rows, cols, 0.0), dv(rows, cols, 0.0);
  auto px = [&](std::size_t r, std::size_t c) { return static_cast<double>(img(r, c)); };
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (rows > 1) {
        if (r == 0) du(r, c) = px(1, c) - px(0, c);
        else if (r == rows - 1) du(r, c) = px(r, c) - px(r - 1, c);
        else du(r, c) = 0.5 * (px(r + 1, c) - px(r - 1, c));
      }
      if (cols > 1) {
        if (c == 0) dv(r, c) = px(r, 1) - px(r, 0);
        else if (c == cols - 1) dv(r, c) = px(r, c) - px(r, c - 1);
        else dv(r, c) = 0.5 * (px(r, c + 1) - px(r, c - 1));
      }
    }
  }
  return {std::move(du), std::move(dv)};
}

/// Steered derivative cos(theta_k) d/du + sin(theta_k) d/dv for every orientation.
inline std::vector<GradientField> directional_gradients(const GrayImage& img,
                                                        const OrientationSet& orientations) {
  const auto [du, dv] = image_partials(img);
  std::vector<GradientField> fields;
  fields.reserve(orientations.size());
  for (std::size_t k = 0; k < orientations.size(); ++k) {
    const double cu = std::cos(orientations[k]), sv = std::sin(orientations[k]);
    RealRaster values(img.rows(), img.cols());
    for (std::size_t p = 0; p < values.size(); ++p)
      values.data()[p] = cu * du.data()[p] + sv * dv.data()[p];
    fields.push_back({k, std::move(values)});
  }
  return fields;
}

namespace detail {

// Zero-padded separable correlation with the window's 1-D taps.
inline RealRaster window_filter(const RealRaster& src, const GaussianWindow& window) {
  const std::size_t rows = src.rows(), cols = src.cols();
  const auto& hk = window.horizontal();
  const auto& vk = window.vertical();
  const auto hh = static_cast<std::ptrdiff_t>(hk.size() / 2);
  const auto vh = static_cast<std::ptrdiff_t>(vk.size() / 2);
  RealRaster tmp(rows, cols, 0.0), out(rows, cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &src.data()[r * cols];
    double* o = &tmp.data()[r * cols];
    for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(cols); ++c) {
      double s = 0.0;
      const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(-hh, -c);
      const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(hh, static_cast<std::ptrdiff_t>(cols) - 1 - c);
      for (std::ptrdiff_t d = lo; d <= hi; ++d) s += hk[d + hh] * in[c + d];
      o[c] = s;
    }
  }
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    double* o = &out.data()[r * cols];
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(-vh, -r);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(vh, static_cast<std::ptrdiff_t>(rows) - 1 - r);
    for (std::ptrdiff_t d = lo; d <= hi; ++d) {
      const double w = vk[d + vh];
      const double* in = &tmp.data()[(r + d) * cols];
      for (std::size_t c = 0; c < cols; ++c) o[c] += w * in[c];
    }
  }
  return out;
}

}  // namespace detail

/// Window-weighted sum of the product field g_i * g_j around each pixel.
inline TensorMap tensor_map(const GradientField& gi, const GradientField& gj,
                            const GaussianWindow& window) {
  if (!gi.values.same_shape(gj.values)) throw DimensionError("gradient fields differ in size");
  if (window.width() > gi.values.cols() || window.height() > gi.values.rows())
    throw ConfigError("window " + std::to_string(window.height()) + "x" +
                      std::to_string(window.width()) + " exceeds image " +
                      std::to_string(gi.values.rows()) + "x" + std::to_string(gi.values.cols()));
  RealRaster product(gi.values.rows(), gi.values.cols());
  for (std::size_t p = 0; p < product.size(); ++p)
    product.data()[p] = gi.values.data()[p] * gj.values.data()[p];
  return {gi.orientation_index, gj.orientation_index, detail::window_filter(product, window)};
}

/// All n^2 ordered-pair tensor maps. Map (j, i) is a copy of map (i, j).
inline TensorCascade build_cascade(const GrayImage& img, const OrientationSet& orientations,
                                   const GaussianWindow& window) {
  const auto fields = directional_gradients(img, orientations);
  const std::size_t n = orientations.size();
  TensorCascade cascade{n, std::vector<TensorMap>(n * n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      cascade.maps[i * n + j] = tensor_map(fields[i], fields[j], window);
      if (j != i) cascade.maps[j * n + i] = {j, i, cascade.maps[i * n + j].values};
    }
  }
  return cascade;
}

inline SingularSpectrum singular_values(const TensorMap& map) {
  return {jacobi_singular_values(map.values), map.values.rows(), map.values.cols()};
}

/// Relative margin under which two top singular values count as equal.
inline constexpr double kCoherenceTieTolerance = 1e-10;

struct CoherentChoice {
  std::size_t index = 0;  // row-major position in the cascade
  double strength = 0.0;  // largest singular value of the chosen map
};

/// Position of the map with the largest top singular value. Ties (within
/// kCoherenceTieTolerance) go to the smallest (i, j) in row-major order.
/// Maps whose Frobenius norm cannot reach the running best are skipped.
inline CoherentChoice select_coherent_index(const TensorCascade& cascade) {
  if (cascade.maps.empty()) throw DomainError("cascade has no maps");
  const std::size_t count = cascade.maps.size();
  std::vector<double> frob(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto& d = cascade.maps[k].values.data();
    frob[k] = std::sqrt(detail::dot(d.data(), d.data(), d.size()));
  }
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return frob[a] > frob[b]; });

  std::vector<std::optional<double>> strength(count);
  double best = -1.0;
  for (std::size_t k : order) {
    if (best >= 0.0 && frob[k] < best * (1.0 - kCoherenceTieTolerance)) break;
    const std::size_t n = cascade.n;
    const std::size_t i = n ? k / n : 0, j = n ? k % n : 0;
    const std::size_t mirror = j * n + i;
    if (n && mirror < k && strength[mirror] &&
        cascade.maps[mirror].values == cascade.maps[k].values) {
      strength[k] = strength[mirror];
    } else {
      strength[k] = top_singular_value(cascade.maps[k].values);
    }
    best = std::max(best, *strength[k]);
  }
  for (std::size_t k = 0; k < count; ++k)
    if (strength[k] && *strength[k] >= best * (1.0 - kCoherenceTieTolerance)) return {k, *strength[k]};
  return {order.front(), best};
}

inline const TensorMap& select_coherent(const TensorCascade& cascade) {
  return cascade.maps[select_coherent_index(cascade).index];
}

}  // namespace cst
