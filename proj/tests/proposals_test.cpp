#include <gtest/gtest.h>

#include <map>
#include <set>

#include "cst/proposals.hpp"
#include "cst/synthetic.hpp"
#include "oracles.hpp"

using namespace cst;

namespace {

BinaryMask mask_with_rects(std::size_t rows, std::size_t cols, const std::vector<BoundingBox>& rects) {
  BinaryMask m(rows, cols, 0);
  for (const auto& b : rects)
    for (auto r = b.y_min; r <= b.y_max(); ++r)
      for (auto c = b.x_min; c <= b.x_max(); ++c) m(r, c) = 1;
  return m;
}

GrayImage scene(std::size_t rows, std::size_t cols, Pixel background,
                const std::vector<std::pair<BoundingBox, Pixel>>& rects) {
  Raster<Pixel> px(rows, cols, background);
  for (const auto& [b, v] : rects)
    for (auto r = b.y_min; r <= b.y_max(); ++r)
      for (auto c = b.x_min; c <= b.x_max(); ++c) px(r, c) = v;
  return GrayImage(px);
}

// Partition of foreground pixels into 8-connected sets, by flood fill.
std::vector<std::set<std::size_t>> flood_partition(const BinaryMask& m) {
  std::vector<std::set<std::size_t>> parts;
  std::vector<bool> seen(m.size(), false);
  for (std::size_t start = 0; start < m.size(); ++start) {
    if (!m.data()[start] || seen[start]) continue;
    std::set<std::size_t> part;
    std::vector<std::size_t> stack{start};
    seen[start] = true;
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      part.insert(p);
      const auto r = static_cast<std::int64_t>(p / m.cols()), c = static_cast<std::int64_t>(p % m.cols());
      for (std::int64_t dr = -1; dr <= 1; ++dr)
        for (std::int64_t dc = -1; dc <= 1; ++dc) {
          const auto nr = r + dr, nc = c + dc;
          if (nr < 0 || nc < 0 || nr >= static_cast<std::int64_t>(m.rows()) || nc >= static_cast<std::int64_t>(m.cols())) continue;
          const auto q = static_cast<std::size_t>(nr) * m.cols() + static_cast<std::size_t>(nc);
          if (m.data()[q] && !seen[q]) seen[q] = true, stack.push_back(q);
        }
    }
    parts.push_back(std::move(part));
  }
  return parts;
}

// Otsu by brute force: every split of the 256-bin histogram, between-class
// variance from the bin indices of the raw values.
std::size_t otsu_oracle_bin(const RealRaster& v) {
  const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
  std::vector<std::size_t> bins;
  for (double x : v.data()) bins.push_back(otsu_bin_of(x, *lo, *hi));
  double best = -1.0;
  std::size_t best_t = 0;
  for (std::size_t t = 0; t < 255; ++t) {
    double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (auto b : bins) (b <= t ? (n0 += 1, s0 += b) : (n1 += 1, s1 += b));
    if (n0 == 0 || n1 == 0) continue;
    const double between = n0 * n1 * (s0 / n0 - s1 / n1) * (s0 / n0 - s1 / n1);
    if (between > best) best = between, best_t = t;
  }
  return best_t;
}

}  // namespace

TEST(Binarize, ConstantMapIsEmpty) {
  const auto m = binarize_values(RealRaster(5, 5, 3.0));
  EXPECT_EQ(foreground_area(m), 0u);
}

TEST(Binarize, PerfectBimodalSplit) {
  RealRaster v(6, 6, 0.0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 6; ++c) v(r, c) = 100.0;
  const auto m = binarize(TensorMap{0, 0, v});
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(m.data()[i], v.data()[i] == 100.0 ? 1 : 0);
}

TEST(Binarize, ThresholdMatchesExhaustiveSearch) {
  Rng rng(40);
  for (int trial = 0; trial < 10; ++trial) {
    RealRaster v(20, 20);
    for (auto& x : v.data()) x = rng.uniform() < 0.4 ? rng.normal() * 3 + 10 : rng.normal() * 5 + 40;
    const auto otsu = otsu_threshold(v);
    ASSERT_TRUE(otsu.separable);
    EXPECT_EQ(otsu.bin, otsu_oracle_bin(v));
  }
}

TEST(CleanMask, IsolatedPixelRemoved) {
  BinaryMask m(9, 9, 0);
  m(4, 4) = 1;
  EXPECT_EQ(foreground_area(clean_mask(m, 5)), 0u);
  EXPECT_EQ(foreground_area(clean_mask(BinaryMask(9, 9, 0), 5)), 0u);
}

TEST(CleanMask, SolidSquareSurvivesOpening) {
  const auto m = mask_with_rects(20, 20, {{5, 5, 10, 10}});
  const auto cleaned = clean_mask(m, 5);
  EXPECT_GE(foreground_area(cleaned), 64u);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LE(cleaned.data()[i], m.data()[i]);
}

TEST(Contours, EmptyMask) { EXPECT_TRUE(trace_contours(BinaryMask(5, 5, 0)).empty()); }

TEST(Contours, SquareBorder) {
  const auto contours = trace_contours(mask_with_rects(8, 8, {{2, 2, 4, 4}}));
  ASSERT_EQ(contours.size(), 1u);
  std::set<std::pair<std::int64_t, std::int64_t>> expected, got;
  for (std::int64_t r = 2; r < 6; ++r)
    for (std::int64_t c = 2; c < 6; ++c)
      if (r == 2 || r == 5 || c == 2 || c == 5) expected.insert({r, c});
  for (const auto& p : contours[0].points) got.insert({p.row, p.col});
  EXPECT_EQ(got, expected);
  EXPECT_EQ(contours[0].points.size(), 12u);
}

TEST(Contours, ClosedAndEightAdjacent) {
  Rng rng(41);
  BinaryMask m(30, 30, 0);
  for (auto& b : m.data()) b = rng.uniform() < 0.55;
  for (const auto& contour : trace_contours(m)) {
    const auto& pts = contour.points;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto& a = pts[i];
      const auto& b = pts[(i + 1) % pts.size()];
      EXPECT_LE(std::abs(a.row - b.row), 1);
      EXPECT_LE(std::abs(a.col - b.col), 1);
      EXPECT_EQ(m(a.row, a.col), 1);
    }
  }
}

TEST(Contours, TwoSquaresTwoContours) {
  EXPECT_EQ(trace_contours(mask_with_rects(20, 20, {{1, 1, 5, 5}, {10, 10, 6, 6}})).size(), 2u);
}

TEST(Contours, FillRestoresSolidComponents) {
  const auto m = mask_with_rects(30, 30, {{2, 2, 10, 8}, {15, 12, 9, 14}});
  EXPECT_EQ(fill_contours(trace_contours(m), 30, 30), m);
  // A ring fills to its outer boundary.
  auto ring = mask_with_rects(20, 20, {{3, 3, 12, 12}});
  for (std::int64_t r = 6; r < 12; ++r)
    for (std::int64_t c = 6; c < 12; ++c) ring(r, c) = 0;
  EXPECT_EQ(fill_contours(trace_contours(ring), 20, 20), mask_with_rects(20, 20, {{3, 3, 12, 12}}));
}

TEST(Labels, EmptyMask) { EXPECT_EQ(label_components(BinaryMask(4, 4, 0)).label_count, 0u); }

TEST(Labels, RasterDiscoveryOrder) {
  const auto regions = label_components(mask_with_rects(20, 20, {{12, 1, 3, 3}, {1, 8, 3, 3}}));
  ASSERT_EQ(regions.label_count, 2u);
  EXPECT_EQ(regions.label_image(1, 12), 1u);
  EXPECT_EQ(regions.label_image(8, 1), 2u);
}

TEST(Labels, MatchFloodFillPartition) {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    BinaryMask m(25, 31, 0);
    for (auto& b : m.data()) b = rng.uniform() < 0.35;
    const auto regions = label_components(m);
    const auto parts = flood_partition(m);
    ASSERT_EQ(regions.label_count, parts.size());
    for (const auto& part : parts) {
      const auto label = regions.label_image.data()[*part.begin()];
      EXPECT_GT(label, 0u);
      std::size_t count = 0;
      for (auto l : regions.label_image.data()) count += l == label;
      EXPECT_EQ(count, part.size());
      for (auto p : part) EXPECT_EQ(regions.label_image.data()[p], label);
    }
  }
}

TEST(Boxes, SinglePixelAndRectangle) {
  BinaryMask m(10, 10, 0);
  m(3, 5) = 1;
  EXPECT_EQ(bounding_box(label_components(m), 1), (BoundingBox{5, 3, 1, 1}));
  EXPECT_EQ(bounding_box(label_components(mask_with_rects(10, 10, {{0, 0, 6, 4}})), 1), (BoundingBox{0, 0, 6, 4}));
}

TEST(Boxes, MatchPixelScan) {
  Rng rng(43);
  BinaryMask m(40, 40, 0);
  for (auto& b : m.data()) b = rng.uniform() < 0.3;
  const auto regions = label_components(m);
  for (std::size_t l = 1; l <= regions.label_count; ++l) {
    std::int64_t r0 = 99, r1 = -1, c0 = 99, c1 = -1;
    for (std::int64_t r = 0; r < 40; ++r)
      for (std::int64_t c = 0; c < 40; ++c)
        if (regions.label_image(r, c) == l) r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
    EXPECT_EQ(bounding_box(regions, l), (BoundingBox{c0, r0, c1 - c0 + 1, r1 - r0 + 1}));
  }
  EXPECT_THROW(bounding_box(regions, regions.label_count + 1), LookupError);
  EXPECT_THROW(bounding_box(regions, 0), LookupError);
}

TEST(Crop, IdentityPixelAndRegion) {
  Rng rng(44);
  const auto img = oracle::random_image(rng, 12, 15);
  EXPECT_EQ(crop(img, img.extent()), img);
  EXPECT_EQ(crop(img, {7, 4, 1, 1})(0, 0), img(4, 7));
  const BoundingBox b{3, 2, 9, 6};
  const auto out = crop(img, b);
  ASSERT_EQ(out.rows(), 6u);
  ASSERT_EQ(out.cols(), 9u);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 9; ++c) EXPECT_EQ(out(r, c), img(r + 2, c + 3));
  EXPECT_THROW(crop(img, {10, 0, 6, 2}), BoundsError);
}

TEST(Removal, EmptyRegionsKeepImage) {
  Rng rng(45);
  const auto img = oracle::random_image(rng, 10, 10);
  EXPECT_EQ(remove_objects(img, label_components(BinaryMask(10, 10, 0))), img);
}

TEST(Removal, SquareTakesBackgroundLevel) {
  const auto img = scene(30, 30, 100, {{{10, 10, 8, 8}, 255}});
  const auto out = remove_objects(img, label_components(mask_with_rects(30, 30, {{10, 10, 8, 8}})));
  for (auto p : out.pixels().data()) EXPECT_EQ(p, 100);
  EXPECT_THROW(remove_objects(img, label_components(BinaryMask(5, 5, 0))), DimensionError);
}

TEST(Removal, RemovedObjectIsNotFoundAgain) {
  SynthSpec spec;
  spec.seed = 3;
  const auto scan = generate_synthetic(spec);
  CstConfig config;
  const auto pass = run_cst_pass(scan.image, config);
  auto regions = label_components(fill_contours(trace_contours(pass.cleaned), scan.image.rows(), scan.image.cols()));
  const auto first = bounding_boxes(regions);
  const auto next = run_cst_pass(remove_objects(scan.image, regions), update_scaling(config, 1));
  const auto again = bounding_boxes(label_components(fill_contours(trace_contours(next.cleaned), scan.image.rows(), scan.image.cols())));
  for (const auto& a : first)
    for (const auto& b : again) EXPECT_LE(iou(a, b), 0.5);
}

TEST(Scaling, DecayPerPass) {
  CstConfig c;
  EXPECT_DOUBLE_EQ(update_scaling(c, 1).scaling, 0.8);
  c.decay = 1.0;
  EXPECT_DOUBLE_EQ(update_scaling(c, 1).scaling, 1.0);
  CstConfig d;
  for (std::size_t k = 1; k <= 7; ++k) {
    d = update_scaling(d, k);
    EXPECT_NEAR(d.scaling, std::pow(0.8, static_cast<double>(k)), 1e-12);
  }
  EXPECT_THROW(update_scaling(d, 0), DomainError);
  d.scaling = 0.01;
  EXPECT_DOUBLE_EQ(d.window_sigma(), d.sigma_floor);
}

TEST(MoreObjects, ContentAndCap) {
  CstConfig config;
  EXPECT_FALSE(has_more_objects(GrayImage(64, 64, 256, 120), config, 0));
  const auto img = scene(64, 64, 200, {{{20, 20, 24, 24}, 30}});
  EXPECT_TRUE(has_more_objects(img, config, 0));
  EXPECT_FALSE(has_more_objects(img, config, config.max_iterations));
}

TEST(Extract, BlankScan) {
  EXPECT_TRUE(extract_proposals(GrayImage(64, 64, 256, 90), CstConfig{}).empty());
}

TEST(Extract, TwoDisjointSquares) {
  const BoundingBox a{20, 20, 40, 40}, b{80, 70, 36, 36};
  const auto img = scene(128, 128, 200, {{a, 40}, {b, 60}});
  const auto proposals = extract_proposals(img, CstConfig{}, "two");
  ASSERT_EQ(proposals.size(), 2u);
  for (const auto& truth : {a, b}) {
    double best = 0.0;
    for (const auto& p : proposals) best = std::max(best, iou(p.box, truth));
    EXPECT_GE(best, 0.9);
  }
  for (const auto& p : proposals) EXPECT_EQ(p.source_id, "two");
}

TEST(Extract, OverlappingShapesAcrossIterations) {
  OcclusionSpec spec;
  spec.base.seed = 7;
  const auto scan = generate_occluded_pair(spec);
  const auto proposals = extract_proposals(scan.image, CstConfig{});
  std::map<std::string, std::size_t> found_in;
  for (const auto& object : scan.objects) {
    double best = 0.0;
    for (const auto& p : proposals)
      if (iou(p.box, object.box) > best) best = iou(p.box, object.box), found_in[object.label] = p.iteration;
    EXPECT_GE(best, 0.5) << object.label;
  }
  // The faint shape only separates once the strong one is erased.
  EXPECT_LT(found_in["A"], found_in["B"]);
}

TEST(Extract, CleanedAreaShrinksUpToRemovalSlack) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    GrayImage current = generate_synthetic(spec).image;
    CstConfig config;
    std::size_t previous_area = 0, slack = 0;
    for (std::size_t iteration = 1; iteration <= config.max_iterations; ++iteration) {
      const auto pass = run_cst_pass(current, config);
      const auto area = foreground_area(pass.cleaned);
      if (iteration > 1) {
        EXPECT_LE(area, previous_area + slack) << "seed " << seed << " pass " << iteration;
      }
      if (area == 0) break;
      const auto regions = label_components(fill_contours(trace_contours(pass.cleaned), current.rows(), current.cols()));
      // One-pixel dilation ring of every removed component.
      BinaryMask removed(current.rows(), current.cols(), 0);
      for (std::size_t i = 0; i < removed.size(); ++i) removed.data()[i] = regions.label_image.data()[i] != 0;
      slack = foreground_area(detail::dilate_square(removed)) - foreground_area(removed);
      previous_area = area;
      current = remove_objects(current, regions);
      config = update_scaling(config, iteration);
    }
  }
}

TEST(Extract, InvariantsOnSyntheticScans) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    const auto scan = generate_synthetic(spec);
    CstConfig config;
    const auto traced = extract_proposals_traced(scan.image, config);
    EXPECT_LE(traced.passes.size(), config.max_iterations);
    for (const auto& p : traced.proposals) {
      EXPECT_TRUE(p.box.within(256, 256));
      EXPECT_EQ(p.crop.rows(), static_cast<std::size_t>(p.box.height));
      EXPECT_EQ(p.crop.cols(), static_cast<std::size_t>(p.box.width));
      EXPECT_EQ(p.crop, crop(scan.image, p.box));
      EXPECT_GE(p.iteration, 1u);
      EXPECT_GE(p.box.width, 6);
      EXPECT_GE(p.box.height, 6);
    }
    for (std::size_t i = 0; i < traced.proposals.size(); ++i)
      for (std::size_t j = i + 1; j < traced.proposals.size(); ++j)
        EXPECT_LE(iou(traced.proposals[i].box, traced.proposals[j].box), config.dedup_iou);
    // Same input, same output.
    const auto again = extract_proposals(scan.image, config);
    ASSERT_EQ(again.size(), traced.proposals.size());
    for (std::size_t i = 0; i < again.size(); ++i) {
      EXPECT_EQ(again[i].box, traced.proposals[i].box);
      EXPECT_EQ(again[i].crop, traced.proposals[i].crop);
    }
  }
}

TEST(Split, RingWithDividerBecomesTwoRegions) {
  // Outline of a 20x30 rectangle with a vertical wall in the middle.
  BinaryMask edges(40, 50, 0);
  for (std::int64_t r = 5; r < 25; ++r)
    for (std::int64_t c = 5; c < 35; ++c)
      if (r == 5 || r == 24 || c == 5 || c == 34 || c == 20) edges(r, c) = 1;
  const auto filled = label_components(fill_contours(trace_contours(edges), 40, 50));
  ASSERT_EQ(filled.label_count, 1u);
  const auto split = split_enclosed_regions(filled, edges, 16);
  ASSERT_EQ(split.label_count, 2u);
  const auto boxes = bounding_boxes(split);
  EXPECT_LT(boxes[0].x_max(), boxes[1].x_min + 2);
  std::size_t covered = 0;
  for (auto l : split.label_image.data()) covered += l != 0;
  EXPECT_EQ(covered, 20u * 30u);
  // A single face stays whole.
  EXPECT_EQ(split_enclosed_regions(filled, mask_with_rects(40, 50, {}), 16).label_count, 1u);
}

TEST(Config, Validation) {
  CstConfig c;
  EXPECT_NO_THROW(c.validate());
  c.window_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.decay = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.max_iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}
