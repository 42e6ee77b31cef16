#pragma once

// Seeded synthetic scans: textured background, composited shapes of known
// class and extent, additive Gaussian noise.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "cst/error.hpp"
#include "cst/image.hpp"
#include "cst/raster.hpp"
#include "cst/rng.hpp"

namespace cst {

enum class ShapeKind { kDisc, kRectangle, kLShape, kBar };

inline std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kDisc: return "disc";
    case ShapeKind::kRectangle: return "rectangle";
    case ShapeKind::kLShape: return "l_shape";
    case ShapeKind::kBar: return "bar";
  }
  return "unknown";
}

inline ShapeKind shape_kind_from_string(const std::string& name) {
  if (name == "disc") return ShapeKind::kDisc;
  if (name == "rectangle") return ShapeKind::kRectangle;
  if (name == "l_shape") return ShapeKind::kLShape;
  if (name == "bar") return ShapeKind::kBar;
  throw ConfigError("unknown shape kind '" + name + "'");
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool valid() const { return lo <= hi; }
};

struct ShapeClass {
  std::string label;
  ShapeKind kind = ShapeKind::kDisc;
  Range intensity{40, 70};
  Range size{28, 64};  // characteristic extent in pixels (diameter / long side)
};

struct SynthSpec {
  std::size_t rows = 256;
  std::size_t cols = 256;
  std::uint32_t max_level = 256;
  double background_level = 200.0;
  double texture_amplitude = 10.0;
  Range texture_period{60, 160};
  double noise_sigma = 3.0;
  double blur_sigma = 1.0;        // detector point-spread, applied before noise
  std::size_t min_objects = 1;
  std::size_t max_objects = 6;
  double max_overlap = 0.3;       // intersection / smaller shape area, per pair
  double min_separation = 40.0;   // intensity gap to the background and to overlapped shapes
  std::size_t max_attempts = 1000;
  std::uint64_t seed = 1;
  std::vector<ShapeClass> shapes = default_shapes();

  static std::vector<ShapeClass> default_shapes() {
    return {{"disc", ShapeKind::kDisc, {20, 60}, {30, 60}},
            {"rectangle", ShapeKind::kRectangle, {110, 150}, {30, 64}},
            {"l_shape", ShapeKind::kLShape, {70, 110}, {34, 64}},
            {"bar", ShapeKind::kBar, {10, 50}, {48, 80}}};
  }

  void validate() const {
    if (rows < 8 || cols < 8) throw ConfigError("synthetic scans must be at least 8x8");
    if (min_objects > max_objects) throw ConfigError("object count range is empty");
    if (!(max_overlap >= 0.0 && max_overlap < 1.0)) throw ConfigError("max_overlap must lie in [0, 1)");
    if (!texture_period.valid() || texture_period.lo <= 0) throw ConfigError("texture period range is invalid");
    if (max_objects > 0 && shapes.empty()) throw ConfigError("shape inventory is empty");
    for (const auto& s : shapes)
      if (!s.intensity.valid() || !s.size.valid() || s.size.lo < 3)
        throw ConfigError("shape class '" + s.label + "' has an empty range");
  }
};

/// One composited object with its exact pixel mask.
struct SynthObject {
  std::string label;
  ShapeKind kind = ShapeKind::kDisc;
  double intensity = 0.0;
  BoundingBox box;
  std::vector<std::int64_t> pixels;  // row-major linear indices
};

struct SynthScan {
  GrayImage image;
  std::vector<SynthObject> objects;  // in compositing order (later ones on top)
};

namespace detail {

struct Point2 { double x, y; };

inline bool point_in_polygon(const std::vector<Point2>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    if ((poly[i].y > y) != (poly[j].y > y) &&
        x < (poly[j].x - poly[i].x) * (y - poly[i].y) / (poly[j].y - poly[i].y) + poly[i].x)
      in = !in;
  }
  return in;
}

inline std::vector<Point2> transform(std::vector<Point2> pts, double angle, double cx, double cy) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (auto& p : pts) p = {cx + c * p.x - s * p.y, cy + s * p.x + c * p.y};
  return pts;
}

// Pixel set of one shape centered at (cx, cy); pixel centers are sampled.
inline std::vector<std::int64_t> rasterize_shape(ShapeKind kind, double extent, Rng& rng, double cx,
                                                 double cy, std::size_t rows, std::size_t cols) {
  std::vector<Point2> poly;
  double radius = 0.0;
  switch (kind) {
    case ShapeKind::kDisc:
      radius = extent / 2.0;
      break;
    case ShapeKind::kRectangle: {
      double w = extent, h = extent * rng.uniform(0.65, 1.0);
      if (rng.below(2)) std::swap(w, h);
      poly = {{-w / 2, -h / 2}, {w / 2, -h / 2}, {w / 2, h / 2}, {-w / 2, h / 2}};
      break;
    }
    case ShapeKind::kLShape: {
      const double w = extent, h = extent * rng.uniform(0.75, 1.0), t = extent * rng.uniform(0.3, 0.4);
      poly = {{-w / 2, -h / 2}, {-w / 2 + t, -h / 2}, {-w / 2 + t, h / 2 - t},
              {w / 2, h / 2 - t}, {w / 2, h / 2}, {-w / 2, h / 2}};
      poly = transform(poly, std::numbers::pi / 2 * static_cast<double>(rng.below(4)), 0, 0);
      break;
    }
    case ShapeKind::kBar: {
      const double len = extent, thick = rng.uniform(6.0, 10.0);
      poly = transform({{-len / 2, -thick / 2}, {len / 2, -thick / 2}, {len / 2, thick / 2}, {-len / 2, thick / 2}},
                       rng.uniform(0.0, std::numbers::pi), 0, 0);
      break;
    }
  }
  if (kind != ShapeKind::kDisc) poly = transform(poly, 0.0, cx, cy);
  const double reach = kind == ShapeKind::kDisc ? radius : extent;
  const auto r0 = static_cast<std::int64_t>(std::floor(cy - reach)), r1 = static_cast<std::int64_t>(std::ceil(cy + reach));
  const auto c0 = static_cast<std::int64_t>(std::floor(cx - reach)), c1 = static_cast<std::int64_t>(std::ceil(cx + reach));
  std::vector<std::int64_t> pixels;
  for (auto r = std::max<std::int64_t>(0, r0); r <= std::min<std::int64_t>(rows - 1, r1); ++r)
    for (auto c = std::max<std::int64_t>(0, c0); c <= std::min<std::int64_t>(cols - 1, c1); ++c) {
      const double x = static_cast<double>(c) + 0.5, y = static_cast<double>(r) + 0.5;
      const bool in = kind == ShapeKind::kDisc
                          ? (x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius
                          : point_in_polygon(poly, x, y);
      if (in) pixels.push_back(r * static_cast<std::int64_t>(cols) + c);
    }
  return pixels;
}

inline BoundingBox extent_of(const std::vector<std::int64_t>& pixels, std::size_t cols) {
  std::int64_t r0 = INT64_MAX, r1 = -1, c0 = INT64_MAX, c1 = -1;
  for (auto p : pixels) {
    const auto r = p / static_cast<std::int64_t>(cols), c = p % static_cast<std::int64_t>(cols);
    r0 = std::min(r0, r); r1 = std::max(r1, r);
    c0 = std::min(c0, c); c1 = std::max(c1, c);
  }
  return {c0, r0, c1 - c0 + 1, r1 - r0 + 1};
}

inline std::size_t overlap_count(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
  // both sorted ascending
  std::size_t n = 0;
  for (auto i = a.begin(), j = b.begin(); i != a.end() && j != b.end();) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else { ++n; ++i; ++j; }
  }
  return n;
}

// Separable Gaussian blur with replicated borders, kernel radius 3 sigma.
inline std::vector<double> gaussian_blur(const std::vector<double>& src, std::size_t rows,
                                         std::size_t cols, double sigma) {
  const auto radius = static_cast<std::int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double sum = 0.0;
  for (std::int64_t i = -radius; i <= radius; ++i)
    sum += taps[i + radius] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  for (double& t : taps) t /= sum;
  const auto R = static_cast<std::int64_t>(rows), C = static_cast<std::int64_t>(cols);
  std::vector<double> tmp(src.size()), out(src.size());
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t d = -radius; d <= radius; ++d)
        s += taps[d + radius] * src[r * C + std::clamp<std::int64_t>(c + d, 0, C - 1)];
      tmp[r * C + c] = s;
    }
  for (std::int64_t r = 0; r < R; ++r)
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t d = -radius; d <= radius; ++d)
        s += taps[d + radius] * tmp[std::clamp<std::int64_t>(r + d, 0, R - 1) * C + c];
      out[r * C + c] = s;
    }
  return out;
}


// Background level plus low-frequency texture from a few plane waves.
inline std::vector<double> background_field(const SynthSpec& spec, Rng& rng) {
  const std::size_t rows = spec.rows, cols = spec.cols;
  std::vector<double> field(rows * cols, spec.background_level);
  if (spec.texture_amplitude <= 0) return field;
  for (int wave = 0; wave < 3; ++wave) {
    const double angle = rng.uniform(0, std::numbers::pi);
    const double period = rng.uniform(spec.texture_period.lo, spec.texture_period.hi);
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    const double kx = std::cos(angle) * 2 * std::numbers::pi / period;
    const double ky = std::sin(angle) * 2 * std::numbers::pi / period;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        field[r * cols + c] += spec.texture_amplitude / 3.0 *
                               std::sin(kx * static_cast<double>(c) + ky * static_cast<double>(r) + phase);
  }
  return field;
}

// Detector blur, additive noise, then quantization.
inline GrayImage finish_scan(std::vector<double> field, const SynthSpec& spec, Rng& rng) {
  if (spec.blur_sigma > 0) field = gaussian_blur(field, spec.rows, spec.cols, spec.blur_sigma);
  Raster<Pixel> px(spec.rows, spec.cols);
  const double top = static_cast<double>(spec.max_level - 1);
  for (std::size_t p = 0; p < px.size(); ++p) {
    const double v = field[p] + (spec.noise_sigma > 0 ? spec.noise_sigma * rng.normal() : 0.0);
    px.data()[p] = static_cast<Pixel>(std::clamp(std::round(v), 0.0, top));
  }
  return GrayImage(std::move(px), spec.max_level);
}

}  // namespace detail

/// Composites a seeded random scene. Objects are painted opaquely in order;
/// each annotation is the full extent of its shape, occluded or not.
/// Throws PlacementError when an object cannot be placed within the overlap
/// and separation budget after max_attempts tries.
inline SynthScan generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t rows = spec.rows, cols = spec.cols;
  std::vector<double> field = detail::background_field(spec, rng);
  const std::vector<double> background = field;

  SynthScan scan;
  const std::size_t count = static_cast<std::size_t>(
      rng.between(static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));
  for (std::size_t n = 0; n < count; ++n) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.max_attempts && !placed; ++attempt) {
      const auto& cls = spec.shapes[rng.below(spec.shapes.size())];
      const double extent = rng.uniform(cls.size.lo, cls.size.hi);
      const double margin = extent / 2.0 + 2.0;
      if (2 * margin >= static_cast<double>(std::min(rows, cols))) continue;
      const double cx = rng.uniform(margin, static_cast<double>(cols) - margin);
      const double cy = rng.uniform(margin, static_cast<double>(rows) - margin);
      auto pixels = detail::rasterize_shape(cls.kind, extent, rng, cx, cy, rows, cols);
      const double intensity = std::round(rng.uniform(cls.intensity.lo, cls.intensity.hi));
      if (pixels.size() < 9) continue;
      bool ok = true;
      double bg_mean = 0.0;
      for (auto p : pixels) bg_mean += background[p];
      bg_mean /= static_cast<double>(pixels.size());
      if (std::abs(bg_mean - intensity) < spec.min_separation) ok = false;
      for (const auto& other : scan.objects) {
        if (!ok) break;
        const auto shared = detail::overlap_count(pixels, other.pixels);
        if (shared == 0) continue;
        const double smaller = static_cast<double>(std::min(pixels.size(), other.pixels.size()));
        if (static_cast<double>(shared) / smaller > spec.max_overlap) ok = false;
        if (std::abs(other.intensity - intensity) < spec.min_separation) ok = false;
      }
      if (!ok) continue;
      SynthObject obj{cls.label, cls.kind, intensity, detail::extent_of(pixels, cols), std::move(pixels)};
      for (auto p : obj.pixels) field[p] = intensity;
      scan.objects.push_back(std::move(obj));
      placed = true;
    }
    if (!placed)
      throw PlacementError("could not place object " + std::to_string(n + 1) + " within " +
                           std::to_string(spec.max_attempts) + " attempts");
  }

  scan.image = detail::finish_scan(std::move(field), spec, rng);
  return scan;
}

/// Two rectangles: a high-contrast A and a fainter B painted over one corner
/// of A, with a quarter of B's area (by default) lying on A. Background,
/// blur and noise follow `base`; its object inventory is ignored.
struct OcclusionSpec {
  SynthSpec base;
  double overlap = 0.25;           // fraction of B's area lying on A
  Range a_intensity{20, 50};
  Range b_intensity{135, 150};
  Range a_side{56, 80};
  Range b_side{40, 56};
};

inline SynthScan generate_occluded_pair(const OcclusionSpec& spec) {
  spec.base.validate();
  if (!(spec.overlap > 0 && spec.overlap < 1)) throw ConfigError("overlap must lie in (0, 1)");
  Rng rng(spec.base.seed);
  const std::size_t rows = spec.base.rows, cols = spec.base.cols;
  std::vector<double> field = detail::background_field(spec.base, rng);

  const auto side = [&](const Range& r) { return static_cast<std::int64_t>(std::llround(rng.uniform(r.lo, r.hi))); };
  const std::int64_t aw = side(spec.a_side), ah = side(spec.a_side);
  const std::int64_t bw = side(spec.b_side), bh = side(spec.b_side);
  // Overlap block ow x oh with the aspect of B and ow*oh ~= overlap * bw*bh.
  const double scale = std::sqrt(spec.overlap);
  const std::int64_t ow = std::max<std::int64_t>(1, std::llround(scale * static_cast<double>(bw)));
  const std::int64_t oh = std::max<std::int64_t>(1, std::llround(scale * static_cast<double>(bh)));
  const std::int64_t span_w = aw + bw - ow, span_h = ah + bh - oh;
  if (span_w + 4 > static_cast<std::int64_t>(cols) || span_h + 4 > static_cast<std::int64_t>(rows))
    throw PlacementError("scan too small for the occluded pair");
  const std::int64_t left = rng.between(2, static_cast<std::int64_t>(cols) - span_w - 2);
  const std::int64_t top = rng.between(2, static_cast<std::int64_t>(rows) - span_h - 2);
  const bool b_right = rng.below(2) == 1, b_below = rng.below(2) == 1;
  const BoundingBox a{b_right ? left : left + bw - ow, b_below ? top : top + bh - oh, aw, ah};
  const BoundingBox b{b_right ? a.x_max() - ow + 1 : a.x_min - bw + ow, b_below ? a.y_max() - oh + 1 : a.y_min - bh + oh,
                      bw, bh};

  SynthScan scan;
  for (const auto& [label, box, range] : {std::tuple{"A", a, spec.a_intensity}, std::tuple{"B", b, spec.b_intensity}}) {
    const double intensity = std::round(rng.uniform(range.lo, range.hi));
    SynthObject obj{label, ShapeKind::kRectangle, intensity, box, {}};
    for (auto y = box.y_min; y <= box.y_max(); ++y)
      for (auto x = box.x_min; x <= box.x_max(); ++x) {
        const auto p = y * static_cast<std::int64_t>(cols) + x;
        obj.pixels.push_back(p);
        field[static_cast<std::size_t>(p)] = intensity;
      }
    scan.objects.push_back(std::move(obj));
  }
  scan.image = detail::finish_scan(std::move(field), spec.base, rng);
  return scan;
}

}  // namespace cst
