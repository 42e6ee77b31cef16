#pragma once

// Iterative object-proposal extraction: binarize the coherent tensor
// representation, clean it, trace outer contours, label the enclosed
// regions, box and crop them, erase them from the scan and repeat at a
// finer window scale until nothing is left.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "cst/error.hpp"
#include "cst/image.hpp"
#include "cst/raster.hpp"
#include "cst/structure_tensor.hpp"

namespace cst {

using BinaryMask = Raster<std::uint8_t>;  // 0 = background, 1 = foreground

struct PixelCoord {
  std::int64_t row = 0;
  std::int64_t col = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

struct Contour {
  std::vector<PixelCoord> points;  // closed: last point is 8-adjacent to the first
};

struct LabeledRegions {
  Raster<std::uint32_t> label_image;  // 0 = background
  std::size_t label_count = 0;
};

inline std::size_t foreground_area(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count(mask.data().begin(), mask.data().end(), 1));
}

// ---------------------------------------------------------------------------
// Binarization

struct OtsuResult {
  bool separable = false;   // false for constant input
  std::size_t bin = 0;      // last bin of the background class
  double threshold = 0.0;   // values strictly above the bin's upper edge are foreground
};

inline std::size_t otsu_bin_of(double value, double lo, double hi, std::size_t bins = 256) {
  const double scaled = (value - lo) / (hi - lo) * static_cast<double>(bins);
  return std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, scaled)));
}

/// Otsu threshold over a 256-bin histogram spanning [min, max] of `values`.
/// The first bin maximizing the between-class variance wins.
inline OtsuResult otsu_threshold(const RealRaster& values) {
  constexpr std::size_t kBins = 256;
  for (double x : values.data())
    if (!std::isfinite(x)) throw NumericError("tensor map contains non-finite values");
  const auto [lo_it, hi_it] = std::minmax_element(values.data().begin(), values.data().end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return {};
  std::array<double, kBins> hist{};
  for (double x : values.data()) hist[otsu_bin_of(x, lo, hi)] += 1.0;
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (std::size_t b = 0; b < kBins; ++b) sum_all += static_cast<double>(b) * hist[b];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  std::size_t best_bin = 0;
  for (std::size_t t = 0; t + 1 < kBins; ++t) {
    w0 += hist[t];
    sum0 += static_cast<double>(t) * hist[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = t;
    }
  }
  if (best < 0.0) return {};
  return {true, best_bin, lo + static_cast<double>(best_bin + 1) * (hi - lo) / kBins};
}

inline BinaryMask binarize_values(const RealRaster& values) {
  BinaryMask mask(values.rows(), values.cols(), 0);
  const auto otsu = otsu_threshold(values);
  if (!otsu.separable) return mask;
  const auto [lo, hi] = std::minmax_element(values.data().begin(), values.data().end());
  for (std::size_t p = 0; p < values.size(); ++p)
    mask.data()[p] = otsu_bin_of(values.data()[p], *lo, *hi) > otsu.bin ? 1 : 0;
  return mask;
}

inline BinaryMask binarize(const TensorMap& map) { return binarize_values(map.values); }

// ---------------------------------------------------------------------------
// Morphology and connectivity

namespace detail {

inline constexpr std::array<std::array<int, 2>, 8> kNeighbors8{{
    {0, -1}, {-1, -1}, {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}}};  // clockwise from west
inline constexpr std::array<std::array<int, 2>, 4> kNeighbors4{{{0, -1}, {-1, 0}, {0, 1}, {1, 0}}};

inline bool inside(const auto& raster, std::int64_t r, std::int64_t c) {
  return r >= 0 && c >= 0 && r < static_cast<std::int64_t>(raster.rows()) &&
         c < static_cast<std::int64_t>(raster.cols());
}

// Erosion treats out-of-image pixels as background.
inline BinaryMask erode_cross(const BinaryMask& in) {
  BinaryMask out(in.rows(), in.cols(), 0);
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(in.rows()); ++r)
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(in.cols()); ++c) {
      if (!in(r, c)) continue;
      bool keep = true;
      for (const auto& [dr, dc] : kNeighbors4)
        keep = keep && inside(in, r + dr, c + dc) && in(r + dr, c + dc);
      out(r, c) = keep ? 1 : 0;
    }
  return out;
}

inline BinaryMask dilate_cross(const BinaryMask& in) {
  BinaryMask out = in;
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(in.rows()); ++r)
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(in.cols()); ++c) {
      if (!in(r, c)) continue;
      for (const auto& [dr, dc] : kNeighbors4)
        if (inside(in, r + dr, c + dc)) out(r + dr, c + dc) = 1;
    }
  return out;
}

inline BinaryMask dilate_square(const BinaryMask& in) {
  BinaryMask out = in;
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(in.rows()); ++r)
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(in.cols()); ++c) {
      if (!in(r, c)) continue;
      for (const auto& [dr, dc] : kNeighbors8)
        if (inside(in, r + dr, c + dc)) out(r + dr, c + dc) = 1;
    }
  return out;
}

}  // namespace detail

/// 8-connected components, numbered 1.. in raster order of their first pixel.
inline LabeledRegions label_components(const BinaryMask& mask) {
  LabeledRegions out{Raster<std::uint32_t>(mask.rows(), mask.cols(), 0), 0};
  std::vector<PixelCoord> stack;
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(mask.rows()); ++r) {
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(mask.cols()); ++c) {
      if (!mask(r, c) || out.label_image(r, c)) continue;
      const auto label = static_cast<std::uint32_t>(++out.label_count);
      out.label_image(r, c) = label;
      stack.push_back({r, c});
      while (!stack.empty()) {
        const auto p = stack.back();
        stack.pop_back();
        for (const auto& [dr, dc] : detail::kNeighbors8) {
          const auto nr = p.row + dr, nc = p.col + dc;
          if (detail::inside(mask, nr, nc) && mask(nr, nc) && !out.label_image(nr, nc)) {
            out.label_image(nr, nc) = label;
            stack.push_back({nr, nc});
          }
        }
      }
    }
  }
  return out;
}

/// Pixel count per label; index 0 holds the background count.
inline std::vector<std::size_t> label_areas(const LabeledRegions& regions) {
  std::vector<std::size_t> areas(regions.label_count + 1, 0);
  for (auto l : regions.label_image.data()) ++areas[l];
  return areas;
}

/// Opening with a 3x3 cross, then removal of 8-connected components
/// smaller than `min_area` pixels.
inline BinaryMask clean_mask(const BinaryMask& mask, std::size_t min_area) {
  BinaryMask opened = detail::dilate_cross(detail::erode_cross(mask));
  const auto regions = label_components(opened);
  const auto areas = label_areas(regions);
  for (std::size_t p = 0; p < opened.size(); ++p) {
    const auto l = regions.label_image.data()[p];
    if (l && areas[l] < min_area) opened.data()[p] = 0;
  }
  return opened;
}

// ---------------------------------------------------------------------------
// Contours

/// Outer boundary of every 8-connected component by Moore-neighbor tracing,
/// starting at the component's first pixel in raster order and walking
/// clockwise. Holes are not traced. Thin parts are visited once per side.
inline std::vector<Contour> trace_contours(const BinaryMask& mask) {
  const auto regions = label_components(mask);
  std::vector<Contour> contours;
  std::vector<bool> started(regions.label_count + 1, false);
  const auto& labels = regions.label_image;
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(mask.rows()); ++r) {
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(mask.cols()); ++c) {
      const auto label = labels(r, c);
      if (!label || started[label]) continue;
      started[label] = true;
      auto member = [&](std::int64_t rr, std::int64_t cc) {
        return detail::inside(labels, rr, cc) && labels(rr, cc) == label;
      };
      Contour contour;
      const PixelCoord start{r, c};
      contour.points.push_back(start);
      // Entering the start pixel from its west neighbor, which is background.
      PixelCoord current = start;
      int back = 0;  // direction from current to the backtrack position
      const int start_back = back;
      const std::size_t limit = 8 * mask.size() + 8;
      for (std::size_t step = 0; step < limit; ++step) {
        int found = -1;
        for (int k = 1; k <= 8; ++k) {
          const int d = (back + k) % 8;
          if (member(current.row + detail::kNeighbors8[d][0], current.col + detail::kNeighbors8[d][1])) {
            found = d;
            break;
          }
        }
        if (found < 0) break;  // isolated pixel
        const PixelCoord prev_probe{current.row + detail::kNeighbors8[(found + 7) % 8][0],
                                    current.col + detail::kNeighbors8[(found + 7) % 8][1]};
        const PixelCoord next{current.row + detail::kNeighbors8[found][0],
                              current.col + detail::kNeighbors8[found][1]};
        // Backtrack for `next` is the last background probe, seen from `next`.
        int nb = 0;
        for (int d = 0; d < 8; ++d)
          if (next.row + detail::kNeighbors8[d][0] == prev_probe.row &&
              next.col + detail::kNeighbors8[d][1] == prev_probe.col)
            nb = d;
        current = next;
        back = nb;
        if (current == start && back == start_back) break;
        if (current == start) {
          // Re-entering the start from another side: keep walking but do not
          // record the start twice in a row.
          if (!(contour.points.back() == start)) contour.points.push_back(current);
          continue;
        }
        contour.points.push_back(current);
      }
      if (contour.points.size() > 1 && contour.points.back() == start) contour.points.pop_back();
      contours.push_back(std::move(contour));
    }
  }
  return contours;
}

/// Region enclosed by the given closed contours: contour pixels plus every
/// pixel that cannot be reached from the image border through 4-connected
/// non-contour pixels.
inline BinaryMask fill_contours(const std::vector<Contour>& contours, std::size_t rows,
                                std::size_t cols) {
  BinaryMask wall(rows, cols, 0);
  for (const auto& contour : contours)
    for (const auto& p : contour.points)
      if (detail::inside(wall, p.row, p.col)) wall(p.row, p.col) = 1;
  BinaryMask outside(rows, cols, 0);
  std::vector<PixelCoord> stack;
  auto seed = [&](std::int64_t r, std::int64_t c) {
    if (!wall(r, c) && !outside(r, c)) {
      outside(r, c) = 1;
      stack.push_back({r, c});
    }
  };
  const auto R = static_cast<std::int64_t>(rows), C = static_cast<std::int64_t>(cols);
  for (std::int64_t c = 0; c < C; ++c) { seed(0, c); seed(R - 1, c); }
  for (std::int64_t r = 0; r < R; ++r) { seed(r, 0); seed(r, C - 1); }
  while (!stack.empty()) {
    const auto p = stack.back();
    stack.pop_back();
    for (const auto& [dr, dc] : detail::kNeighbors4) {
      const auto nr = p.row + dr, nc = p.col + dc;
      if (detail::inside(wall, nr, nc)) seed(nr, nc);
    }
  }
  BinaryMask filled(rows, cols, 0);
  for (std::size_t p = 0; p < filled.size(); ++p) filled.data()[p] = outside.data()[p] ? 0 : 1;
  return filled;
}

// ---------------------------------------------------------------------------
// Boxes, crops, removal

/// Minimum bounding rectangle of every label, indexed by label - 1.
inline std::vector<BoundingBox> bounding_boxes(const LabeledRegions& regions) {
  struct Span { std::int64_t r0, r1, c0, c1; };
  std::vector<Span> spans(regions.label_count, {INT64_MAX, -1, INT64_MAX, -1});
  const auto& img = regions.label_image;
  for (std::size_t r = 0; r < img.rows(); ++r)
    for (std::size_t c = 0; c < img.cols(); ++c) {
      const auto l = img(r, c);
      if (!l) continue;
      auto& s = spans[l - 1];
      const auto rr = static_cast<std::int64_t>(r), cc = static_cast<std::int64_t>(c);
      s.r0 = std::min(s.r0, rr); s.r1 = std::max(s.r1, rr);
      s.c0 = std::min(s.c0, cc); s.c1 = std::max(s.c1, cc);
    }
  std::vector<BoundingBox> boxes;
  boxes.reserve(spans.size());
  for (const auto& s : spans) boxes.push_back({s.c0, s.r0, s.c1 - s.c0 + 1, s.r1 - s.r0 + 1});
  return boxes;
}

inline BoundingBox bounding_box(const LabeledRegions& regions, std::size_t label) {
  if (label == 0 || label > regions.label_count)
    throw LookupError("label " + std::to_string(label) + " does not exist");
  const auto box = bounding_boxes(regions)[label - 1];
  if (box.empty()) throw LookupError("label " + std::to_string(label) + " has no pixels");
  return box;
}

inline GrayImage crop(const GrayImage& img, const BoundingBox& box) {
  if (!box.within(static_cast<std::int64_t>(img.rows()), static_cast<std::int64_t>(img.cols())))
    throw BoundsError("crop box lies outside the image");
  Raster<Pixel> out(box.height, box.width);
  for (std::int64_t r = 0; r < box.height; ++r)
    for (std::int64_t c = 0; c < box.width; ++c) out(r, c) = img(box.y_min + r, box.x_min + c);
  return GrayImage(std::move(out), img.max_level());
}

/// Erases every labeled region. Each label's pixels, grown by one pixel in
/// all 8 directions, are overwritten with the median of the two-pixel ring
/// just outside the grown region. Ring pixels covered by any grown region
/// are excluded; if a ring is empty the median of all untouched pixels is used.
inline GrayImage remove_objects(const GrayImage& img, const LabeledRegions& regions) {
  if (!regions.label_image.same_shape(img.pixels()))
    throw DimensionError("label image does not match scan dimensions");
  if (regions.label_count == 0) return img;
  const auto R = static_cast<std::int64_t>(img.rows()), C = static_cast<std::int64_t>(img.cols());

  BinaryMask any(img.rows(), img.cols(), 0);
  for (std::size_t p = 0; p < any.size(); ++p) any.data()[p] = regions.label_image.data()[p] ? 1 : 0;
  const BinaryMask covered = detail::dilate_square(any);

  std::vector<Pixel> untouched;
  auto fallback = [&]() -> Pixel {
    if (untouched.empty()) {
      for (std::size_t p = 0; p < covered.size(); ++p)
        if (!covered.data()[p]) untouched.push_back(img.pixels().data()[p]);
      if (untouched.empty()) untouched = img.pixels().data();
      std::nth_element(untouched.begin(), untouched.begin() + (untouched.size() - 1) / 2, untouched.end());
    }
    return untouched[(untouched.size() - 1) / 2];
  };

  Raster<Pixel> out = img.pixels();
  const auto boxes = bounding_boxes(regions);
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const auto label = static_cast<std::uint32_t>(k + 1);
    const auto& b = boxes[k];
    if (b.empty()) continue;
    const std::int64_t r0 = std::max<std::int64_t>(0, b.y_min - 3), r1 = std::min(R - 1, b.y_max() + 3);
    const std::int64_t c0 = std::max<std::int64_t>(0, b.x_min - 3), c1 = std::min(C - 1, b.x_max() + 3);
    // Chebyshev distance to the label, capped at 4, within the local window.
    const std::size_t h = static_cast<std::size_t>(r1 - r0 + 1), w = static_cast<std::size_t>(c1 - c0 + 1);
    Raster<std::uint8_t> dist(h, w, 4);
    for (std::int64_t r = r0; r <= r1; ++r)
      for (std::int64_t c = c0; c <= c1; ++c)
        if (regions.label_image(r, c) == label) dist(r - r0, c - c0) = 0;
    for (std::uint8_t level = 1; level <= 3; ++level) {
      Raster<std::uint8_t> next = dist;
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          if (dist(r, c) != level - 1) continue;
          for (const auto& [dr, dc] : detail::kNeighbors8) {
            const auto nr = static_cast<std::int64_t>(r) + dr, nc = static_cast<std::int64_t>(c) + dc;
            if (detail::inside(dist, nr, nc) && next(nr, nc) > level) next(nr, nc) = level;
          }
        }
      dist = std::move(next);
    }
    std::vector<Pixel> ring;
    for (std::int64_t r = r0; r <= r1; ++r)
      for (std::int64_t c = c0; c <= c1; ++c) {
        const auto d = dist(r - r0, c - c0);
        if ((d == 2 || d == 3) && !covered(r, c)) ring.push_back(img(r, c));
      }
    Pixel fill;
    if (ring.empty()) {
      fill = fallback();
    } else {
      std::nth_element(ring.begin(), ring.begin() + (ring.size() - 1) / 2, ring.end());
      fill = ring[(ring.size() - 1) / 2];
    }
    for (std::int64_t r = r0; r <= r1; ++r)
      for (std::int64_t c = c0; c <= c1; ++c)
        if (dist(r - r0, c - c0) <= 1) out(r, c) = fill;
  }
  return GrayImage(std::move(out), img.max_level());
}

/// Regions enclosed by the filled outer contours, with any component that
/// surrounds two or more interior regions (faces of at least `min_face_area`
/// pixels, 8-connected, not part of `transitions`) divided among those faces.
/// Transition pixels join the nearest face by simultaneous breadth-first
/// growth, so touching objects separated by an internal transition come out
/// as separate labels. Labels are renumbered in raster order.
inline LabeledRegions split_enclosed_regions(const LabeledRegions& filled, const BinaryMask& transitions,
                                             std::size_t min_face_area) {
  const std::size_t rows = transitions.rows(), cols = transitions.cols();
  // Faces: 4-connected interior pixels of filled components.
  Raster<std::uint32_t> face(rows, cols, 0);
  std::vector<std::size_t> face_area{0};
  std::vector<std::uint32_t> face_owner{0};
  std::vector<PixelCoord> stack;
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(rows); ++r)
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(cols); ++c) {
      if (!filled.label_image(r, c) || transitions(r, c) || face(r, c)) continue;
      const auto id = static_cast<std::uint32_t>(face_area.size());
      face_area.push_back(0);
      face_owner.push_back(filled.label_image(r, c));
      face(r, c) = id;
      stack.push_back({r, c});
      while (!stack.empty()) {
        const auto p = stack.back();
        stack.pop_back();
        ++face_area[id];
        for (const auto& [dr, dc] : detail::kNeighbors8) {
          const auto nr = p.row + dr, nc = p.col + dc;
          if (detail::inside(face, nr, nc) && filled.label_image(nr, nc) && !transitions(nr, nc) &&
              !face(nr, nc)) {
            face(nr, nc) = id;
            stack.push_back({nr, nc});
          }
        }
      }
    }
  std::vector<std::size_t> faces_per_component(filled.label_count + 1, 0);
  for (std::size_t f = 1; f < face_area.size(); ++f)
    if (face_area[f] >= min_face_area) ++faces_per_component[face_owner[f]];

  // Seeds: one label per kept face inside a multi-face component, one label
  // per remaining component.
  Raster<std::uint32_t> grown(rows, cols, 0);
  std::vector<std::uint32_t> face_label(face_area.size(), 0), component_label(filled.label_count + 1, 0);
  std::uint32_t next = 0;
  std::deque<PixelCoord> queue;
  for (std::size_t f = 1; f < face_area.size(); ++f)
    if (face_area[f] >= min_face_area && faces_per_component[face_owner[f]] >= 2) face_label[f] = ++next;
  for (std::size_t l = 1; l <= filled.label_count; ++l)
    if (faces_per_component[l] < 2) component_label[l] = ++next;
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(rows); ++r)
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(cols); ++c) {
      const auto owner = filled.label_image(r, c);
      if (!owner) continue;
      if (component_label[owner]) {
        grown(r, c) = component_label[owner];
      } else if (face(r, c) && face_label[face(r, c)]) {
        grown(r, c) = face_label[face(r, c)];
        queue.push_back({r, c});
      }
    }
  while (!queue.empty()) {
    const auto p = queue.front();
    queue.pop_front();
    for (const auto& [dr, dc] : detail::kNeighbors8) {
      const auto nr = p.row + dr, nc = p.col + dc;
      if (detail::inside(grown, nr, nc) && !grown(nr, nc) &&
          filled.label_image(nr, nc) == filled.label_image(p.row, p.col)) {
        grown(nr, nc) = grown(p.row, p.col);
        queue.push_back({nr, nc});
      }
    }
  }

  // Renumber in raster order of first appearance.
  LabeledRegions out{Raster<std::uint32_t>(rows, cols, 0), 0};
  std::vector<std::uint32_t> remap(next + 1, 0);
  for (std::size_t p = 0; p < grown.size(); ++p) {
    const auto g = grown.data()[p];
    if (!g) continue;
    if (!remap[g]) remap[g] = static_cast<std::uint32_t>(++out.label_count);
    out.label_image.data()[p] = remap[g];
  }
  return out;
}

// ---------------------------------------------------------------------------
// The extraction loop

/// How the binarized representation is formed from the cascade.
enum class CoherentMode {
  kSelected,        // the most coherent map alone
  kOrthogonalPair,  // |selected| + |map rotated by a quarter turn in both indices|
};

struct CstConfig {
  std::size_t orientations = 4;
  std::size_t window_size = 5;
  double sigma = 1.0;           // base window sigma
  double scaling = 1.0;         // current scaling factor; window sigma = sigma * scaling
  double decay = 0.8;           // scaling multiplier applied after every pass
  double sigma_floor = 0.5;
  CoherentMode coherent_mode = CoherentMode::kOrthogonalPair;
  std::size_t min_area = 48;    // smallest cleaned component kept, in pixels
  std::size_t max_iterations = 8;
  std::size_t min_proposal_width = 6;
  std::size_t min_proposal_height = 6;
  double max_proposal_fraction = 0.95;  // of the scan area
  double dedup_iou = 0.8;
  // Representation value (gradient magnitude, levels per pixel) below which
  // nothing is foreground. 0 disables.
  double min_transition = 6.0;
  bool split_enclosed = true;   // split components that enclose several regions
  double interior_fraction = 0.5;  // of the Otsu threshold, for transitions inside a component
  std::size_t min_face_area = 16;
  // Pixels trimmed from every side of a region's box. The windowed edge band
  // straddles the object boundary, so filled regions overshoot by about half
  // its width.
  std::size_t box_trim = 2;

  double window_sigma() const { return std::max(sigma_floor, sigma * scaling); }

  void validate() const {
    if (orientations < 2) throw ConfigError("orientations must be at least 2");
    if (window_size == 0 || window_size % 2 == 0) throw ConfigError("window_size must be odd");
    if (!(sigma > 0) || !(scaling > 0) || !(sigma_floor > 0)) throw ConfigError("sigma and scaling must be positive");
    if (!(decay > 0) || decay > 1) throw ConfigError("decay must lie in (0, 1]");
    if (max_iterations < 1) throw ConfigError("max_iterations must be at least 1");
    if (min_area < 1) throw ConfigError("min_area must be positive");
    if (min_proposal_width < 1 || min_proposal_height < 1) throw ConfigError("minimum proposal dims must be positive");
    if (!(max_proposal_fraction > 0) || max_proposal_fraction > 1) throw ConfigError("max_proposal_fraction must lie in (0, 1]");
    if (!(dedup_iou > 0) || dedup_iou > 1) throw ConfigError("dedup_iou must lie in (0, 1]");
    if (!(min_transition >= 0)) throw ConfigError("min_transition must be non-negative");
    if (!(interior_fraction >= 0) || interior_fraction > 1) throw ConfigError("interior_fraction must lie in [0, 1]");
  }
};

struct Proposal {
  BoundingBox box;
  GrayImage crop;
  std::size_t iteration = 1;
  std::string source_id;
};

/// Scaling factor after `iteration` completed passes.
inline CstConfig update_scaling(const CstConfig& config, std::size_t iteration) {
  if (iteration < 1) throw DomainError("iteration counts from 1");
  CstConfig next = config;
  next.scaling = config.scaling * config.decay;
  return next;
}


/// Intermediate products of one cascade pass.
struct CstPass {
  CoherentChoice choice;
  RealRaster representation;
  BinaryMask binary;
  BinaryMask cleaned;
  BinaryMask interior_edges;  // weaker transitions, used only to split enclosed components
};

/// Binarization input for the chosen map. kSelected returns the map itself.
/// kOrthogonalPair adds the map a quarter turn away in both indices and takes
/// the square root, so a diagonal choice becomes the windowed gradient
/// magnitude and edges of every orientation close up into outlines.
inline RealRaster coherent_representation(const TensorCascade& cascade, std::size_t index,
                                          CoherentMode mode) {
  const auto& chosen = cascade.maps[index].values;
  if (mode == CoherentMode::kSelected) return chosen;
  const std::size_t n = cascade.n;
  const std::size_t quarter = static_cast<std::size_t>(std::lround(static_cast<double>(n) / 4.0));
  const std::size_t i = index / n, j = index % n;
  const auto& partner = cascade.at((i + quarter) % n, (j + quarter) % n).values;
  RealRaster out(chosen.rows(), chosen.cols());
  for (std::size_t p = 0; p < out.size(); ++p)
    out.data()[p] = std::sqrt(std::abs(chosen.data()[p]) + std::abs(partner.data()[p]));
  return out;
}

using CascadeObserver = std::function<void(std::size_t iteration, const TensorCascade&, const CoherentChoice&)>;

inline CstPass run_cst_pass(const GrayImage& img, const CstConfig& config,
                            const CascadeObserver& observer = {}, std::size_t iteration = 1) {
  const GaussianWindow window(config.window_sigma(), config.window_size, config.window_size);
  const auto cascade = build_cascade(img, OrientationSet(config.orientations), window);
  CstPass pass;
  pass.choice = select_coherent_index(cascade);
  if (observer) observer(iteration, cascade, pass.choice);
  pass.representation = coherent_representation(cascade, pass.choice.index, config.coherent_mode);
  pass.binary = binarize_values(pass.representation);
  if (config.min_transition > 0)
    for (std::size_t p = 0; p < pass.binary.size(); ++p)
      if (pass.representation.data()[p] < config.min_transition)
        pass.binary.data()[p] = 0;
  pass.cleaned = clean_mask(pass.binary, config.min_area);
  pass.interior_edges = pass.cleaned;
  const auto otsu = otsu_threshold(pass.representation);
  if (otsu.separable && config.interior_fraction > 0) {
    const double floor = std::max(config.min_transition, config.interior_fraction * otsu.threshold);
    for (std::size_t p = 0; p < pass.representation.size(); ++p)
      if (pass.representation.data()[p] >= floor) pass.interior_edges.data()[p] = 1;
  }
  return pass;
}

/// True while fewer than max_iterations passes have run and a fresh pass on
/// `img` still finds a cleaned component.
inline bool has_more_objects(const GrayImage& img, const CstConfig& config, std::size_t completed_passes) {
  if (completed_passes >= config.max_iterations) return false;
  return foreground_area(run_cst_pass(img, config).cleaned) > 0;
}

struct PassRecord {
  std::size_t iteration = 0;
  double window_sigma = 0.0;
  std::size_t coherent_index = 0;
  double coherent_strength = 0.0;
  std::size_t cleaned_area = 0;
  std::size_t components = 0;
  std::size_t proposals_kept = 0;
};

struct ExtractionResult {
  std::vector<Proposal> proposals;
  std::vector<PassRecord> passes;
};

/// Runs cascade passes until a pass finds no component or max_iterations
/// passes have run. Crops come from `scan` as given; later passes see the
/// scan with earlier objects erased. Boxes smaller than the minimum dims,
/// larger than max_proposal_fraction of the scan, or overlapping an earlier
/// proposal above dedup_iou are dropped.
inline ExtractionResult extract_proposals_traced(const GrayImage& scan, const CstConfig& base,
                                                 const std::string& source_id = {},
                                                 const CascadeObserver& observer = {}) {
  base.validate();
  ExtractionResult result;
  const auto scan_area = static_cast<double>(scan.size());
  CstConfig config = base;
  GrayImage current = scan;
  for (std::size_t iteration = 1; iteration <= config.max_iterations; ++iteration) {
    const CstPass pass = run_cst_pass(current, config, observer, iteration);
    PassRecord record{iteration, config.window_sigma(), pass.choice.index, pass.choice.strength,
                      foreground_area(pass.cleaned), 0, 0};
    if (record.cleaned_area == 0) {
      result.passes.push_back(record);
      break;
    }
    const auto contours = trace_contours(pass.cleaned);
    auto regions = label_components(fill_contours(contours, scan.rows(), scan.cols()));
    if (config.split_enclosed) {
      regions = split_enclosed_regions(regions, pass.cleaned, config.min_face_area);
      regions = split_enclosed_regions(regions, pass.interior_edges, config.min_face_area);
    }
    record.components = regions.label_count;
    for (auto box : bounding_boxes(regions)) {
      if (box.empty()) continue;
      const auto trim = static_cast<std::int64_t>(config.box_trim);
      if (box.width > 2 * trim && box.height > 2 * trim)
        box = {box.x_min + trim, box.y_min + trim, box.width - 2 * trim, box.height - 2 * trim};
      if (box.width < static_cast<std::int64_t>(config.min_proposal_width) ||
          box.height < static_cast<std::int64_t>(config.min_proposal_height))
        continue;
      if (static_cast<double>(box.area()) > config.max_proposal_fraction * scan_area) continue;
      const bool duplicate = std::any_of(result.proposals.begin(), result.proposals.end(),
                                         [&](const Proposal& p) { return iou(p.box, box) > config.dedup_iou; });
      if (duplicate) continue;
      result.proposals.push_back({box, crop(scan, box), iteration, source_id});
      ++record.proposals_kept;
    }
    result.passes.push_back(record);
    current = remove_objects(current, regions);
    config = update_scaling(config, iteration);
  }
  return result;
}

inline std::vector<Proposal> extract_proposals(const GrayImage& scan, const CstConfig& config,
                                               const std::string& source_id = {}) {
  return extract_proposals_traced(scan, config, source_id).proposals;
}

}  // namespace cst
