#pragma once

// Detection metrics: IoU, greedy matching, confusion-derived rates,
// threshold sweeps on a 0.001 grid, AP, AUC, and curve output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cst/error.hpp"
#include "cst/raster.hpp"

namespace cst {

struct GroundTruthBox {
  std::string source_id;
  BoundingBox box;
  std::string label;
};

struct DetectionRecord {
  std::string source_id;
  BoundingBox box;
  std::string label;
  double score = 0.0;

  void validate() const {
    if (!(score >= 0.0 && score <= 1.0))
      throw DomainError("detection score " + std::to_string(score) + " outside [0, 1]");
  }
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// A rate together with whether its denominator was nonzero. Undefined
/// rates carry the value 0.
struct Rate {
  double value = 0.0;
  bool defined = false;
};

namespace detail {
inline Rate ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return {0.0, false};
  return {static_cast<double>(num) / static_cast<double>(den), true};
}
}  // namespace detail

inline Rate accuracy(const ConfusionCounts& c) { return detail::ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn); }
inline Rate recall(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fn); }
inline Rate precision(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fp); }
/// 2TP / (2TP + FP + FN), the harmonic mean of precision and recall.
inline Rate f1(const ConfusionCounts& c) { return detail::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn); }
inline Rate fpr(const ConfusionCounts& c) { return detail::ratio(c.fp, c.fp + c.tn); }

// ---------------------------------------------------------------------------
// Matching

struct DetectionMatch {
  std::size_t detection = 0;             // index into the input list
  bool true_positive = false;
  std::optional<std::size_t> truth;      // index into the ground-truth list
  double overlap = 0.0;                  // IoU with the matched truth
};

struct MatchResult {
  ConfusionCounts counts;                // tn is always 0 at box level
  std::vector<DetectionMatch> matches;   // detections of the class, by descending score
  std::vector<bool> truth_matched;       // per ground-truth entry (other classes stay false)

  double mean_iou() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& m : matches)
      if (m.true_positive) sum += m.overlap, ++n;
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

/// Greedy matching for one class. Detections of the class are taken by
/// descending score (stable on input order); each claims the unmatched
/// ground truth of the same class and source with the highest IoU, if that
/// IoU reaches `iou_threshold`. Ground truths left unmatched are false
/// negatives, including those whose region was detected under another label.
inline MatchResult match_detections(const std::vector<DetectionRecord>& dets, const std::vector<GroundTruthBox>& gts,
                                    double iou_threshold, const std::string& label) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw DomainError("iou_threshold must lie in (0, 1]");
  MatchResult result;
  result.truth_matched.assign(gts.size(), false);
  std::map<std::string, std::vector<std::size_t>> truths_by_source;
  std::size_t truth_count = 0;
  for (std::size_t g = 0; g < gts.size(); ++g)
    if (gts[g].label == label) truths_by_source[gts[g].source_id].push_back(g), ++truth_count;

  std::vector<std::size_t> order;
  for (std::size_t d = 0; d < dets.size(); ++d)
    if (dets[d].label == label) order.push_back(d);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  for (const auto d : order) {
    DetectionMatch m{d, false, std::nullopt, 0.0};
    const auto it = truths_by_source.find(dets[d].source_id);
    if (it != truths_by_source.end()) {
      double best = -1.0;
      for (const auto g : it->second) {
        if (result.truth_matched[g]) continue;
        const double v = iou(dets[d].box, gts[g].box);
        if (v >= iou_threshold && v > best) best = v, m.truth = g;
      }
      if (m.truth) {
        result.truth_matched[*m.truth] = true;
        m.true_positive = true;
        m.overlap = best;
      }
    }
    (m.true_positive ? result.counts.tp : result.counts.fp) += 1;
    result.matches.push_back(m);
  }
  result.counts.fn = truth_count - result.counts.tp;
  return result;
}

// ---------------------------------------------------------------------------
// Threshold sweeps

enum class CurveKind { kPR, kROC };

inline std::string to_string(CurveKind kind) { return kind == CurveKind::kPR ? "pr" : "roc"; }

struct CurvePoint {
  double threshold = 0.0;
  double x = 0.0;  // recall (PR) or false positive rate (ROC)
  double y = 0.0;  // precision (PR) or true positive rate (ROC)
  bool defined = true;
  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct Curve {
  CurveKind kind = CurveKind::kPR;
  std::vector<CurvePoint> points;  // thresholds increasing
  bool degenerate = false;         // built from no items
};

inline constexpr std::size_t kSweepSteps = 1000;

inline double sweep_threshold(std::size_t k, std::size_t steps = kSweepSteps) {
  return static_cast<double>(k) / static_cast<double>(steps);
}

struct ScoredItem {
  double score = 0.0;
  bool positive = false;
};

/// Per-threshold confusion counts on the grid k / steps, k = 0..steps. An
/// item is predicted positive at threshold t when its score is >= t. Items
/// added with `add_never` are never predicted positive.
class ThresholdSweep {
 public:
  explicit ThresholdSweep(std::size_t steps = kSweepSteps) : steps_(steps), pos_(steps + 2, 0), neg_(steps + 2, 0) {
    if (steps == 0) throw DomainError("sweep needs at least one step");
  }

  void add(double score, bool positive, std::uint64_t count = 1) {
    if (!(score >= 0.0 && score <= 1.0)) throw DomainError("score " + std::to_string(score) + " outside [0, 1]");
    (positive ? pos_ : neg_)[bucket(score)] += count;
  }
  void add_never(bool positive, std::uint64_t count = 1) { (positive ? pos_ : neg_)[0] += count; }

  std::size_t steps() const { return steps_; }
  std::uint64_t items() const {
    return std::accumulate(pos_.begin(), pos_.end(), std::uint64_t{0}) +
           std::accumulate(neg_.begin(), neg_.end(), std::uint64_t{0});
  }

  /// Confusion counts for every threshold index 0..steps.
  std::vector<ConfusionCounts> counts() const {
    const std::uint64_t total_pos = std::accumulate(pos_.begin(), pos_.end(), std::uint64_t{0});
    const std::uint64_t total_neg = std::accumulate(neg_.begin(), neg_.end(), std::uint64_t{0});
    std::vector<ConfusionCounts> out(steps_ + 1);
    std::uint64_t tp = 0, fp = 0;
    // Bucket b holds items predicted positive for thresholds k < b.
    for (std::size_t k = steps_ + 1; k-- > 0;) {
      tp += pos_[k + 1];
      fp += neg_[k + 1];
      out[k] = {tp, fp, total_neg - fp, total_pos - tp};
    }
    return out;
  }

 private:
  // Number of grid thresholds <= score.
  std::size_t bucket(double score) const {
    auto k = static_cast<std::size_t>(std::floor(score * static_cast<double>(steps_)));
    k = std::min(k, steps_);
    while (k < steps_ && sweep_threshold(k + 1, steps_) <= score) ++k;
    while (k > 0 && sweep_threshold(k, steps_) > score) --k;
    return k + 1;
  }

  std::size_t steps_;
  std::vector<std::uint64_t> pos_, neg_;
};

inline Curve curve_from_sweep(const ThresholdSweep& sweep, CurveKind kind) {
  Curve curve{kind, {}, sweep.items() == 0};
  if (curve.degenerate) {
    curve.points.push_back({0.0, 0.0, 0.0, false});
    return curve;
  }
  const auto counts = sweep.counts();
  curve.points.reserve(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const auto r = recall(counts[k]);
    const auto other = kind == CurveKind::kPR ? precision(counts[k]) : fpr(counts[k]);
    if (kind == CurveKind::kPR)
      curve.points.push_back({sweep_threshold(k, sweep.steps()), r.value, other.value, r.defined && other.defined});
    else
      curve.points.push_back({sweep_threshold(k, sweep.steps()), other.value, r.value, r.defined && other.defined});
  }
  return curve;
}

/// PR or ROC curve over thresholds 0, 0.001, ..., 1. `missed_positives`
/// counts positives that no threshold can recover (ground truths without a
/// detection). Empty input gives a flagged single-point curve.
inline Curve sweep_curve(const std::vector<ScoredItem>& scored, CurveKind kind, std::uint64_t missed_positives = 0,
                         std::size_t steps = kSweepSteps) {
  ThresholdSweep sweep(steps);
  for (const auto& item : scored) sweep.add(item.score, item.positive);
  if (missed_positives) sweep.add_never(true, missed_positives);
  return curve_from_sweep(sweep, kind);
}

/// Left Riemann sum of precision over successive recall decrements, with
/// recall taken as 0 beyond the last threshold.
inline double average_precision(const Curve& curve) {
  if (curve.kind != CurveKind::kPR) throw DomainError("average_precision needs a PR curve");
  double ap = 0.0;
  const auto& pts = curve.points;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const double next_recall = k + 1 < pts.size() ? pts[k + 1].x : 0.0;
    ap += pts[k].y * (pts[k].x - next_recall);
  }
  return ap;
}

/// Trapezoidal area under ROC points sorted by false positive rate.
inline double auc(const Curve& curve) {
  if (curve.kind != CurveKind::kROC) throw DomainError("auc needs a ROC curve");
  auto pts = curve.points;
  std::sort(pts.begin(), pts.end(), [](const CurvePoint& a, const CurvePoint& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) area += (pts[i].x - pts[i - 1].x) * (pts[i].y + pts[i - 1].y) / 2.0;
  return area;
}

/// Mean of per-class AP with the "normal" class left out.
inline double mean_ap(const std::vector<std::pair<std::string, double>>& per_class) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [name, ap] : per_class)
    if (name != "normal") sum += ap, ++n;
  if (n == 0) throw DomainError("mean_ap needs at least one non-normal class");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Per-class evaluation in box or pixel units

enum class EvalUnit { kBoxes, kPixels };

inline std::string to_string(EvalUnit unit) { return unit == EvalUnit::kBoxes ? "boxes" : "pixels"; }

inline EvalUnit eval_unit_from_string(const std::string& s) {
  if (s == "boxes") return EvalUnit::kBoxes;
  if (s == "pixels") return EvalUnit::kPixels;
  throw ConfigError("unit must be 'boxes' or 'pixels', got '" + s + "'");
}

struct ClassReport {
  std::string label;
  double average_precision = 0.0;
  double auc = 0.0;
  Rate precision, recall, f1, fpr, accuracy;
  ConfusionCounts counts;  // at threshold 0 (box) or over all covered pixels (pixel)
  double mean_iou = 0.0;   // matched pairs, box unit only
  std::uint64_t ground_truths = 0;
  Curve pr, roc;
};

struct EvaluationReport {
  EvalUnit unit = EvalUnit::kBoxes;
  double iou_threshold = 0.5;
  std::vector<ClassReport> classes;  // every label, "normal" included
  double mean_ap = 0.0;              // "normal" excluded
  double mean_auc = 0.0;             // "normal" excluded
  double mean_f1 = 0.0;              // "normal" excluded
};

/// Box-level sweep for one class: detections with the label are positives
/// when matched; detections with another label are negatives scored 0
/// (predicted positive only at threshold 0); unmatched ground truths are
/// never recovered.
inline ThresholdSweep box_sweep(const std::vector<DetectionRecord>& dets, const MatchResult& match,
                                const std::string& label) {
  ThresholdSweep sweep;
  for (const auto& m : match.matches) sweep.add(dets[m.detection].score, m.true_positive);
  for (const auto& d : dets)
    if (d.label != label) sweep.add(0.0, false);
  sweep.add_never(true, match.counts.fn);
  return sweep;
}

/// Pixel-level sweep for one class: each pixel of each scan is an item,
/// positive inside any ground-truth box of the class, scored by the highest
/// score of a class detection covering it (0 when uncovered).
inline ThresholdSweep pixel_sweep(const std::vector<DetectionRecord>& dets, const std::vector<GroundTruthBox>& gts,
                                  const std::map<std::string, std::pair<std::size_t, std::size_t>>& dims,
                                  const std::string& label) {
  ThresholdSweep sweep;
  for (const auto& [source, rc] : dims) {
    const auto [rows, cols] = rc;
    Raster<double> score(rows, cols, 0.0);
    Raster<std::uint8_t> truth(rows, cols, 0);
    auto clip = [&](const BoundingBox& b) {
      if (!b.within(rows, cols)) throw BoundsError("box outside scan " + source);
      return b;
    };
    for (const auto& d : dets) {
      if (d.source_id != source || d.label != label) continue;
      const auto b = clip(d.box);
      for (auto y = b.y_min; y <= b.y_max(); ++y)
        for (auto x = b.x_min; x <= b.x_max(); ++x) score(y, x) = std::max(score(y, x), d.score);
    }
    for (const auto& g : gts) {
      if (g.source_id != source || g.label != label) continue;
      const auto b = clip(g.box);
      for (auto y = b.y_min; y <= b.y_max(); ++y)
        for (auto x = b.x_min; x <= b.x_max(); ++x) truth(y, x) = 1;
    }
    for (std::size_t p = 0; p < score.size(); ++p) sweep.add(score.data()[p], truth.data()[p] != 0);
  }
  return sweep;
}

/// Full report over `labels`. Pixel mode needs `dims` (rows, cols) for every
/// source id that appears in detections or ground truth.
inline EvaluationReport evaluate(const std::vector<DetectionRecord>& dets, const std::vector<GroundTruthBox>& gts,
                                 const std::vector<std::string>& labels, EvalUnit unit = EvalUnit::kBoxes,
                                 double iou_threshold = 0.5,
                                 const std::map<std::string, std::pair<std::size_t, std::size_t>>& dims = {}) {
  for (const auto& d : dets) d.validate();
  if (unit == EvalUnit::kPixels) {
    for (const auto& d : dets)
      if (!dims.contains(d.source_id)) throw ValidationError("no scan dimensions for " + d.source_id);
    for (const auto& g : gts)
      if (!dims.contains(g.source_id)) throw ValidationError("no scan dimensions for " + g.source_id);
  }
  EvaluationReport report{unit, iou_threshold, {}, 0.0, 0.0, 0.0};
  std::vector<std::pair<std::string, double>> aps;
  double auc_sum = 0.0, f1_sum = 0.0;
  std::size_t scored = 0;
  for (const auto& label : labels) {
    ClassReport cr;
    cr.label = label;
    const auto match = match_detections(dets, gts, iou_threshold, label);
    cr.ground_truths = match.counts.tp + match.counts.fn;
    cr.mean_iou = match.mean_iou();
    const ThresholdSweep sweep = unit == EvalUnit::kBoxes ? box_sweep(dets, match, label)
                                                          : pixel_sweep(dets, gts, dims, label);
    cr.pr = curve_from_sweep(sweep, CurveKind::kPR);
    cr.roc = curve_from_sweep(sweep, CurveKind::kROC);
    cr.average_precision = average_precision(cr.pr);
    cr.auc = auc(cr.roc);
    if (unit == EvalUnit::kBoxes) {
      cr.counts = match.counts;
    } else {
      // Pixels covered by a class detection at any positive score.
      cr.counts = sweep.counts()[std::min<std::size_t>(1, sweep.steps())];
    }
    cr.precision = precision(cr.counts);
    cr.recall = recall(cr.counts);
    cr.f1 = f1(cr.counts);
    cr.fpr = fpr(cr.counts);
    cr.accuracy = accuracy(cr.counts);
    if (label != "normal") {
      aps.emplace_back(label, cr.average_precision);
      auc_sum += cr.auc;
      f1_sum += cr.f1.value;
      ++scored;
    }
    report.classes.push_back(std::move(cr));
  }
  if (scored) {
    report.mean_ap = mean_ap(aps);
    report.mean_auc = auc_sum / static_cast<double>(scored);
    report.mean_f1 = f1_sum / static_cast<double>(scored);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Output

inline void write_curve_csv(const Curve& curve, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write curve", path.string());
  out << "threshold,x,y\n";
  char line[96];
  for (const auto& p : curve.points) {
    std::snprintf(line, sizeof line, "%.3f,%.17g,%.17g\n", p.threshold, p.x, p.y);
    out << line;
  }
  if (!out) throw IoError("failed writing curve", path.string());
}

/// Simple line plot of a curve on the unit square.
inline std::string curve_svg(const Curve& curve, const std::string& title) {
  constexpr double size = 320, pad = 40;
  auto px = [&](double v) { return pad + v * size; };
  auto py = [&](double v) { return pad + (1.0 - v) * size; };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\"" << size + 2 * pad
      << "\">\n<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
  std::string escaped;
  for (char ch : title) {
    if (ch == '<') escaped += "&lt;";
    else if (ch == '>') escaped += "&gt;";
    else if (ch == '&') escaped += "&amp;";
    else escaped += ch;
  }
  svg << "<text x=\"" << pad << "\" y=\"" << pad - 12 << "\" font-family=\"sans-serif\" font-size=\"14\">" << escaped
      << "</text>\n";
  const bool pr = curve.kind == CurveKind::kPR;
  svg << "<text x=\"" << pad + size / 2 << "\" y=\"" << pad + size + 28
      << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">" << (pr ? "recall" : "false positive rate")
      << "</text>\n<text x=\"12\" y=\"" << pad + size / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 12 "
      << pad + size / 2 << ")\" text-anchor=\"middle\">" << (pr ? "precision" : "true positive rate") << "</text>\n";
  auto pts = curve.points;
  if (!pr)
    std::sort(pts.begin(), pts.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  svg << "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" points=\"";
  for (const auto& p : pts)
    if (p.defined) svg << px(p.x) << ',' << py(p.y) << ' ';
  svg << "\"/>\n</svg>\n";
  return svg.str();
}

inline void write_curve_svg(const Curve& curve, const std::filesystem::path& path, const std::string& title) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write plot", path.string());
  out << curve_svg(curve, title);
}

}  // namespace cst
