// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "commands.hpp"
#include "oracles.hpp"

using namespace cst;
using namespace cst::app;

namespace {

// Pinned tolerances and budgets.
constexpr double kSvdRelTol = 1e-8;
constexpr double kSvdSeconds = 10.0;
constexpr double kGradientTol = 1e-12;
constexpr double kLossGradientRelTol = 1e-5;
constexpr double kRecallAt05 = 0.95;
constexpr double kRecallAt07 = 0.80;
constexpr double kRecallSeconds = 60.0;
constexpr double kE2eMeanAp = 0.85;
constexpr double kE2eAuc = 0.90;
constexpr double kE2eSeconds = 300.0;
constexpr double kMetricTol = 1e-12;
constexpr double kGridApGap = 1.0 / 1000.0;
constexpr double kOcclusionRate = 0.90;
constexpr double kExtractSecondsPerImage = 1.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

// Squared singular values against the eigenvalues of A A^T, relative to the
// largest eigenvalue.
Outcome svd_identity() {
  Rng rng(1001);
  const auto start = Clock::now();
  double worst = 0.0;
  bool ordered = true;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 2 + rng.below(15), cols = 2 + rng.below(15);
    const auto a = oracle::random_matrix(rng, rows, cols);
    const auto s = jacobi_singular_values(a);
    const auto ev = oracle::gram_eigenvalues(a);
    if (s.size() != ev.size()) return {false, "singular value count differs from min(rows, cols)"};
    for (std::size_t k = 0; k < s.size(); ++k) {
      worst = std::max(worst, std::abs(s[k] * s[k] - ev[k]) / std::max(ev[0], 1e-300));
      if (k && s[k] > s[k - 1]) ordered = false;
    }
  }
  const double secs = elapsed(start);
  return {worst <= kSvdRelTol && ordered && secs < kSvdSeconds,
          fmt::format("200 matrices, worst relative error {:.2e}, ordered {}, {:.2f} s", worst, ordered, secs)};
}

Outcome equalization_oracle() {
  Rng rng(1002);
  int exact = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 8 + rng.below(57), cols = 8 + rng.below(57);
    const auto img = oracle::random_image(rng, rows, cols, trial % 3 ? 256 : 16);
    const auto grid = PatchGrid::tile(rows, cols, 1 + rng.below(8), 1 + rng.below(8));
    exact += equalize_adaptive(img, grid) == oracle::equalize(img, grid);
  }
  bool constant_zero = true;
  for (auto p : equalize_adaptive(GrayImage(32, 32, 256, 123), 4, 4).pixels().data()) constant_zero &= p == 0;
  return {exact == 50 && constant_zero,
          fmt::format("{}/50 images identical to the lookup oracle, constant patches map to 0: {}", exact, constant_zero)};
}

Outcome gradient_suites() {
  Rng rng(1003);
  double worst_image = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto img = oracle::random_image(rng, 8, 8);
    const OrientationSet set(4);
    const auto fields = directional_gradients(img, set);
    for (std::size_t k = 0; k < set.size(); ++k)
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c)
          worst_image = std::max(worst_image, std::abs(fields[k].values(r, c) - oracle::directional_derivative(img, set[k], r, c)));
  }
  double worst_loss = 0.0;
  const FeatureSpec spec{2, 4};
  const auto labels = LabelSet::with_normal({"a", "b", "c"});
  for (int trial = 0; trial < 5; ++trial) {
    ClassifierModel model(spec, labels);
    for (auto& w : model.weights) w = rng.uniform(-0.5, 0.5);
    for (auto& b : model.bias) b = rng.uniform(-0.5, 0.5);
    std::vector<LabeledSample> batch;
    for (int i = 0; i < 4; ++i) {
      LabeledSample s{FeatureVector(spec.dimension()), static_cast<std::uint32_t>(rng.below(labels.size()))};
      for (auto& x : s.features) x = rng.uniform(-1.0, 1.0);
      batch.push_back(std::move(s));
    }
    Gradient grad;
    loss_and_gradient(model, batch, grad);
    const double h = 1e-6;
    auto check = [&](double& param, double analytic) {
      const double saved = param;
      param = saved + h;
      const double up = oracle::model_loss(model, batch);
      param = saved - h;
      const double down = oracle::model_loss(model, batch);
      param = saved;
      const double numeric = (up - down) / (2 * h);
      worst_loss = std::max(worst_loss, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    };
    for (std::size_t i = 0; i < model.weights.size(); ++i) check(model.weights[i], grad.weights[i]);
    for (std::size_t i = 0; i < model.bias.size(); ++i) check(model.bias[i], grad.bias[i]);
  }
  return {worst_image <= kGradientTol && worst_loss <= kLossGradientRelTol,
          fmt::format("directional gradients worst {:.2e} on 8x8 images, loss gradient worst relative {:.2e}", worst_image,
                      worst_loss)};
}

Outcome synthetic_recall() {
  std::size_t total = 0, hit05 = 0, hit07 = 0;
  const auto start = Clock::now();
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    SynthSpec spec;
    spec.seed = seed;
    const auto scan = generate_synthetic(spec);
    const auto proposals = extract_proposals(scan.image, CstConfig{});
    for (const auto& obj : scan.objects) {
      double best = 0.0;
      for (const auto& p : proposals) best = std::max(best, iou(p.box, obj.box));
      ++total;
      hit05 += best >= 0.5;
      hit07 += best >= 0.7;
    }
  }
  const double secs = elapsed(start);
  const double r05 = static_cast<double>(hit05) / static_cast<double>(total);
  const double r07 = static_cast<double>(hit07) / static_cast<double>(total);
  return {r05 >= kRecallAt05 && r07 >= kRecallAt07 && secs < kRecallSeconds,
          fmt::format("100 scans, {} shapes, recall {:.3f} at IoU 0.5, {:.3f} at IoU 0.7, {:.1f} s", total, r05, r07, secs)};
}

// synth -> extract (train split) -> balance + train -> pipeline (test split).
std::string end_to_end_once(const fs::path& dir, double& mean_ap, double& mean_auc) {
  RunConfig config;
  config.reseed(1);
  fs::remove_all(dir);
  write_synthetic_dataset(config.synth, 200, dir / "data");
  const auto manifest = load_manifest(dir / "data" / "manifest.json");
  const auto train_set = extract_manifest(config, select_subset(manifest, config, Subset::kTrain));
  std::vector<LabeledProposal> labelled;
  for (const auto& s : train_set.scans)
    for (std::size_t i = 0; i < s.proposals.size(); ++i) labelled.push_back({s.proposals[i], s.labels[i]});
  const auto model = train_on_set(config, labelled);
  const auto summary = run_pipeline(config, select_subset(manifest, config, Subset::kTest), model, dir / "run");
  mean_ap = summary.report.mean_ap;
  mean_auc = summary.report.mean_auc;
  return report_json(summary.report).dump();
}

Outcome end_to_end() {
  const auto root = fs::temp_directory_path() / "cst_acceptance";
  const auto start = Clock::now();
  double ap = 0.0, auc_mean = 0.0, ap2 = 0.0, auc2 = 0.0;
  const auto first = end_to_end_once(root / "a", ap, auc_mean);
  const double secs = elapsed(start);
  const auto second = end_to_end_once(root / "b", ap2, auc2);
  fs::remove_all(root);
  const bool deterministic = first == second;
  return {ap >= kE2eMeanAp && auc_mean >= kE2eAuc && deterministic && secs < kE2eSeconds,
          fmt::format("200 scans, seed 1: mean AP {:.4f}, mean AUC {:.4f}, deterministic {}, {:.1f} s", ap, auc_mean,
                      deterministic, secs)};
}

std::vector<ScoredItem> random_items(Rng& rng, std::size_t n, double positive_rate = 0.5) {
  std::vector<ScoredItem> items;
  for (std::size_t i = 0; i < n; ++i) items.push_back({rng.uniform(), rng.uniform() < positive_rate});
  return items;
}

// Grid metrics against direct recomputation from the raw items.
bool metric_case_matches(const std::vector<ScoredItem>& items, Rng& rng) {
  const auto pr = sweep_curve(items, CurveKind::kPR);
  const auto roc = sweep_curve(items, CurveKind::kROC);
  double ap = 0.0;
  bool ok = pr.points.size() == kSweepSteps + 1;
  for (std::size_t k = 0; k <= kSweepSteps && ok; ++k) {
    const double t = sweep_threshold(k);
    const auto c = oracle::confusion_at(items, t);
    const auto n = k < kSweepSteps ? oracle::confusion_at(items, sweep_threshold(k + 1)) : ConfusionCounts{};
    const double rec = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
    const double prec = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
    const double next = k < kSweepSteps && n.tp + n.fn ? static_cast<double>(n.tp) / static_cast<double>(n.tp + n.fn) : 0.0;
    const double fp_rate = c.fp + c.tn ? static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn) : 0.0;
    ap += prec * (rec - next);
    ok = std::abs(pr.points[k].x - rec) <= kMetricTol && std::abs(pr.points[k].y - prec) <= kMetricTol &&
         std::abs(roc.points[k].x - fp_rate) <= kMetricTol && std::abs(roc.points[k].y - rec) <= kMetricTol;
    const double acc = static_cast<double>(c.tp + c.tn) / static_cast<double>(items.size());
    const double f = c.tp ? 2 * prec * rec / (prec + rec) : 0.0;
    ok = ok && std::abs(accuracy(c).value - acc) <= kMetricTol && std::abs(f1(c).value - f) <= kMetricTol;
  }
  ok = ok && std::abs(average_precision(pr) - ap) <= kMetricTol;
  // AUC against pair counting on grid-rounded scores.
  auto rounded = items;
  for (auto& it : rounded) it.score = std::ceil(it.score * kSweepSteps) / kSweepSteps;
  double wins = 0, pairs = 0;
  for (const auto& p : rounded)
    for (const auto& q : rounded)
      if (p.positive && !q.positive) pairs += 1, wins += p.score > q.score ? 1.0 : p.score == q.score ? 0.5 : 0.0;
  if (pairs > 0) ok = ok && std::abs(auc(sweep_curve(rounded, CurveKind::kROC)) - wins / pairs) <= kMetricTol;
  // IoU against pixel counting, and mAP as the plain mean without "normal".
  const BoundingBox a{rng.between(0, 20), rng.between(0, 20), rng.between(1, 20), rng.between(1, 20)};
  const BoundingBox b{rng.between(0, 20), rng.between(0, 20), rng.between(1, 20), rng.between(1, 20)};
  ok = ok && std::abs(iou(a, b) - oracle::pixel_iou(a, b)) <= kMetricTol;
  const double x = rng.uniform(), y = rng.uniform();
  ok = ok && std::abs(mean_ap({{"gun", x}, {"normal", 0.1}, {"knife", y}}) - (x + y) / 2) <= kMetricTol;
  return ok;
}

Outcome metric_suite() {
  Rng rng(1006);
  int matched = 0;
  for (int trial = 0; trial < 50; ++trial) matched += metric_case_matches(random_items(rng, 20), rng);

  const double hand_ap = average_precision(
      sweep_curve({{0.9, true}, {0.8, false}, {0.7, true}, {0.6, true}}, CurveKind::kPR));
  const bool hand_ok = std::abs(hand_ap - (1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0) <= kMetricTol;
  // ROC corners (0,0) (0,1/3) (1,1/3) (1,2/3) (1,1).
  const double stair = auc(sweep_curve({{0.9, true}, {0.8, false}, {0.7, true}, {0.6, true}}, CurveKind::kROC));
  const bool stair_ok = std::abs(stair - 1.0 / 3.0) <= kMetricTol;

  // Grid AP against the exact all-distinct-thresholds AP on 100-sample inputs.
  double worst_gap = 0.0;
  int over = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto items = random_items(rng, 100, 0.3);
    const double gap = std::abs(average_precision(sweep_curve(items, CurveKind::kPR)) - oracle::exact_average_precision(items));
    worst_gap = std::max(worst_gap, gap);
    over += gap > kGridApGap;
  }
  const bool grid_ok = worst_gap <= kGridApGap;
  return {matched == 50 && hand_ok && stair_ok && grid_ok,
          fmt::format("{}/50 random cases match brute force; hand AP {:.6f}, staircase AUC {:.6f}; "
                      "grid vs exact AP on 1000 100-sample inputs: worst gap {:.5f}, {} over 1/1000",
                      matched, hand_ap, stair, worst_gap, over)};
}

Outcome occlusion() {
  int ordered = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    OcclusionSpec spec;
    spec.base.seed = seed;
    const auto scan = generate_occluded_pair(spec);
    const auto proposals = extract_proposals(scan.image, CstConfig{});
    std::size_t first[2] = {0, 0};
    for (int k = 0; k < 2; ++k)
      for (const auto& p : proposals)
        if (iou(p.box, scan.objects[k].box) >= 0.5 && (!first[k] || p.iteration < first[k])) first[k] = p.iteration;
    ordered += first[0] && first[1] && first[1] > first[0];
  }
  const double rate = ordered / 50.0;
  return {rate >= kOcclusionRate,
          fmt::format("{}/50 seeds recover both objects with B on a later pass than A", ordered)};
}

Outcome extraction_speed() {
  double total = 0.0;
  const int scans = 10;
  for (int seed = 1; seed <= scans; ++seed) {
    SynthSpec spec;
    spec.rows = spec.cols = 512;
    spec.max_objects = 12;
    spec.seed = static_cast<std::uint64_t>(seed);
    const auto scan = generate_synthetic(spec);
    const auto start = Clock::now();
    extract_proposals(scan.image, CstConfig{});
    total += elapsed(start);
  }
  const double mean_secs = total / scans;
  return {mean_secs <= kExtractSecondsPerImage,
          fmt::format("512x512, 4 orientations, 5x5 window, <= 8 passes, one thread: mean {:.3f} s per image", mean_secs)};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::off);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"svd-identity", svd_identity},     {"equalization-oracle", equalization_oracle},
      {"gradients", gradient_suites},     {"synthetic-recall", synthetic_recall},
      {"end-to-end", end_to_end},         {"metric-oracles", metric_suite},
      {"occlusion-order", occlusion},     {"extract-time", extraction_speed}};
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome out;
    try {
      out = run();
    } catch (const std::exception& e) {
      out = {false, std::string("error: ") + e.what()};
    }
    failures += !out.pass;
    std::printf("%s %s: %s\n", out.pass ? "PASS" : "FAIL", name.c_str(), out.detail.c_str());
    std::fflush(stdout);
  }
  return failures ? 1 : 0;
}
