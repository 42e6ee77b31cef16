#pragma once

// Scan representation and contrast enhancement.

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cst/error.hpp"
#include "cst/raster.hpp"

namespace cst {

using Pixel = std::uint16_t;

/// Grayscale scan with `max_level` intensity levels (0 .. max_level-1).
class GrayImage {
 public:
  GrayImage() = default;

  GrayImage(std::size_t rows, std::size_t cols, std::uint32_t max_level = 256, Pixel fill = 0)
      : GrayImage(Raster<Pixel>(rows, cols, fill), max_level) {}

  GrayImage(Raster<Pixel> pixels, std::uint32_t max_level = 256)
      : pixels_(std::move(pixels)), max_level_(max_level) {
    if (pixels_.rows() == 0 || pixels_.cols() == 0)
      throw DimensionError("image must have at least one row and one column");
    if (max_level_ < 2 || max_level_ > 65536)
      throw DomainError("max_level must lie in [2, 65536]");
    for (Pixel p : pixels_.data())
      if (p >= max_level_)
        throw DomainError("pixel value " + std::to_string(p) + " exceeds max_level " +
                          std::to_string(max_level_));
  }

  std::size_t rows() const { return pixels_.rows(); }
  std::size_t cols() const { return pixels_.cols(); }
  std::uint32_t max_level() const { return max_level_; }
  std::size_t size() const { return pixels_.size(); }

  Pixel operator()(std::size_t r, std::size_t c) const { return pixels_(r, c); }
  const Raster<Pixel>& pixels() const { return pixels_; }

  /// Writes one pixel, clamping to the valid level range.
  void set(std::size_t r, std::size_t c, long value) {
    pixels_(r, c) = static_cast<Pixel>(std::clamp<long>(value, 0, max_level_ - 1));
  }

  BoundingBox extent() const {
    return {0, 0, static_cast<std::int64_t>(cols()), static_cast<std::int64_t>(rows())};
  }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  Raster<Pixel> pixels_;
  std::uint32_t max_level_ = 256;
};

/// Three-plane 8-bit color raster.
struct RgbImage {
  Raster<std::uint8_t> red, green, blue;
};

/// Luminance conversion with weights 0.299 / 0.587 / 0.114, rounded half-up.
inline GrayImage to_grayscale(const RgbImage& rgb) {
  if (!rgb.red.same_shape(rgb.green) || !rgb.red.same_shape(rgb.blue))
    throw DimensionError("color channels differ in dimensions");
  Raster<Pixel> out(rgb.red.rows(), rgb.red.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const unsigned weighted = 299u * rgb.red.data()[i] + 587u * rgb.green.data()[i] +
                              114u * rgb.blue.data()[i];
    out.data()[i] = static_cast<Pixel>((weighted + 500u) / 1000u);
  }
  return GrayImage(std::move(out), 256);
}

inline GrayImage to_grayscale(const GrayImage& gray) { return gray; }

/// I x J tiling of an image into rectangular patches. Edge patches are
/// smaller when the dimensions do not divide evenly; rows or columns of the
/// grid that would be empty are dropped.
struct PatchGrid {
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::vector<BoundingBox> patches;  // row-major over the grid

  static PatchGrid tile(std::size_t rows, std::size_t cols, std::size_t grid_rows,
                        std::size_t grid_cols) {
    if (rows == 0 || cols == 0) throw DimensionError("cannot tile an empty image");
    if (grid_rows == 0 || grid_cols == 0) throw ConfigError("grid dimensions must be positive");
    const std::size_t ph = (rows + grid_rows - 1) / grid_rows;
    const std::size_t pw = (cols + grid_cols - 1) / grid_cols;
    PatchGrid grid;
    grid.grid_rows = (rows + ph - 1) / ph;
    grid.grid_cols = (cols + pw - 1) / pw;
    for (std::size_t gr = 0; gr < grid.grid_rows; ++gr) {
      for (std::size_t gc = 0; gc < grid.grid_cols; ++gc) {
        const std::size_t r0 = gr * ph, c0 = gc * pw;
        grid.patches.push_back({static_cast<std::int64_t>(c0), static_cast<std::int64_t>(r0),
                                static_cast<std::int64_t>(std::min(pw, cols - c0)),
                                static_cast<std::int64_t>(std::min(ph, rows - r0))});
      }
    }
    return grid;
  }

  /// True when the patches are disjoint and cover exactly rows x cols.
  bool tiles(std::size_t rows, std::size_t cols) const {
    Raster<std::uint8_t> hits(rows, cols, 0);
    for (const auto& p : patches) {
      if (!p.within(static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)))
        return false;
      for (auto r = p.y_min; r <= p.y_max(); ++r)
        for (auto c = p.x_min; c <= p.x_max(); ++c)
          if (hits(r, c)++) return false;
    }
    return std::all_of(hits.data().begin(), hits.data().end(), [](auto h) { return h == 1; });
  }
};

struct Histogram {
  std::vector<std::uint64_t> counts;
  std::vector<std::uint64_t> cdf;
  std::uint64_t cdf_min = 0;  // smallest nonzero cumulative count

  std::uint64_t total() const { return cdf.empty() ? 0 : cdf.back(); }
};

inline Histogram histogram_from_counts(std::vector<std::uint64_t> counts) {
  Histogram h;
  h.counts = std::move(counts);
  h.cdf.resize(h.counts.size());
  std::partial_sum(h.counts.begin(), h.counts.end(), h.cdf.begin());
  auto first = std::find_if(h.cdf.begin(), h.cdf.end(), [](auto v) { return v != 0; });
  h.cdf_min = first == h.cdf.end() ? 0 : *first;
  return h;
}

inline Histogram compute_histogram(const GrayImage& img, const BoundingBox& region) {
  if (region.empty()) throw DomainError("histogram region is empty");
  if (!region.within(static_cast<std::int64_t>(img.rows()), static_cast<std::int64_t>(img.cols())))
    throw BoundsError("histogram region lies outside the image");
  std::vector<std::uint64_t> counts(img.max_level(), 0);
  for (auto r = region.y_min; r <= region.y_max(); ++r) {
    const auto row = img.pixels().row(r);
    for (auto c = region.x_min; c <= region.x_max(); ++c) ++counts[row[c]];
  }
  return histogram_from_counts(std::move(counts));
}

struct EqualizeOptions {
  /// Clip limit as a multiple of the mean bin count; 0 disables clipping.
  double clip_limit = 0.0;
  /// Normalize by the full image pixel count instead of the patch count.
  bool literal_denominator = false;
};

namespace detail {

// Excess above the clip ceiling is spread evenly over all bins; the leftover
// from integer division goes to the lowest bins.
inline void clip_histogram(std::vector<std::uint64_t>& counts, std::uint64_t pixels,
                           double clip_limit) {
  const auto levels = counts.size();
  const auto ceiling = static_cast<std::uint64_t>(
      std::max(1.0, clip_limit * static_cast<double>(pixels) / static_cast<double>(levels)));
  std::uint64_t excess = 0;
  for (auto& c : counts)
    if (c > ceiling) { excess += c - ceiling; c = ceiling; }
  const std::uint64_t share = excess / levels, rest = excess % levels;
  for (std::size_t v = 0; v < levels; ++v) counts[v] += share + (v < rest ? 1 : 0);
}

}  // namespace detail

/// Per-patch histogram equalization: every pixel v of a patch with P pixels
/// maps to round_half_up((cdf(v) - cdf_min) / (P - cdf_min) * (L - 1)).
/// A constant patch maps to 0. Patches are processed independently.
inline GrayImage equalize_adaptive(const GrayImage& img, const PatchGrid& grid,
                                   const EqualizeOptions& options = {}) {
  if (!grid.tiles(img.rows(), img.cols())) throw DimensionError("patch grid does not tile the image");
  Raster<Pixel> out(img.rows(), img.cols());
  const std::uint64_t top = img.max_level() - 1;
  for (const auto& patch : grid.patches) {
    const auto pixels = static_cast<std::uint64_t>(patch.area());
    Histogram h = compute_histogram(img, patch);
    if (options.clip_limit > 0.0) {
      detail::clip_histogram(h.counts, pixels, options.clip_limit);
      h = histogram_from_counts(std::move(h.counts));
    }
    const std::uint64_t total = options.literal_denominator ? img.size() : pixels;
    std::vector<Pixel> lut(img.max_level(), 0);
    if (total > h.cdf_min) {
      const std::uint64_t den = total - h.cdf_min;
      for (std::size_t v = 0; v < lut.size(); ++v) {
        if (h.cdf[v] < h.cdf_min) continue;  // level absent below the first occupied one
        const std::uint64_t num = (h.cdf[v] - h.cdf_min) * top;
        lut[v] = static_cast<Pixel>(std::min<std::uint64_t>(top, (2 * num + den) / (2 * den)));
      }
    }
    for (auto r = patch.y_min; r <= patch.y_max(); ++r)
      for (auto c = patch.x_min; c <= patch.x_max(); ++c) out(r, c) = lut[img(r, c)];
  }
  return GrayImage(std::move(out), img.max_level());
}

inline GrayImage equalize_adaptive(const GrayImage& img, std::size_t grid_rows = 8,
                                   std::size_t grid_cols = 8, const EqualizeOptions& options = {}) {
  return equalize_adaptive(img, PatchGrid::tile(img.rows(), img.cols(), grid_rows, grid_cols),
                           options);
}

}  // namespace cst
