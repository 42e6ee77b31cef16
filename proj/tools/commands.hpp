#pragma once

// Run configuration and the stages behind the `cst` subcommands.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "cst/classifier.hpp"
#include "cst/dataset.hpp"
#include "cst/evaluation.hpp"
#include "cst/image.hpp"
#include "cst/image_io.hpp"
#include "cst/proposals.hpp"
#include "cst/synthetic.hpp"

namespace cst::app {

namespace fs = std::filesystem;

/// A stage of `pipeline` failed; `stage` names it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what) : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Configuration

struct EnhanceOptions {
  bool enabled = false;
  std::size_t grid_rows = 8;
  std::size_t grid_cols = 8;
  EqualizeOptions equalize;
};

struct EvalOptions {
  EvalUnit unit = EvalUnit::kBoxes;
  double iou_threshold = 0.5;
  double label_iou = 0.5;  // proposal-to-annotation IoU for training labels
};

enum class Subset { kAll, kTrain, kTest };

inline Subset subset_from_string(const std::string& s) {
  if (s == "all") return Subset::kAll;
  if (s == "train") return Subset::kTrain;
  if (s == "test") return Subset::kTest;
  throw ConfigError("subset must be all, train or test, got '" + s + "'");
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  EnhanceOptions enhance;
  CstConfig cst;
  FeatureSpec features;
  TrainingConfig training;
  EvalOptions evaluation;
  SplitSpec split;
  SynthSpec synth;
  fs::path dump_tensors;  // empty: no dumps

  /// Pushes the run seed into every seeded stage.
  void reseed(std::uint64_t s) {
    seed = s;
    synth.seed = s;
    training.seed = s;
    split.seed = s;
  }

  void validate() const {
    if (jobs < 1) throw ConfigError("jobs must be at least 1");
    if (enhance.grid_rows < 1 || enhance.grid_cols < 1) throw ConfigError("enhance grid must be positive");
    if (!(enhance.equalize.clip_limit >= 0)) throw ConfigError("clip_limit must be non-negative");
    cst.validate();
    if (features.thumb < 1) throw ConfigError("features.thumb must be positive");
    if (features.bins < 1) throw ConfigError("features.bins must be positive");
    training.validate();
    if (!(evaluation.iou_threshold > 0 && evaluation.iou_threshold <= 1)) throw ConfigError("iou_threshold must lie in (0, 1]");
    if (!(evaluation.label_iou > 0 && evaluation.label_iou <= 1)) throw ConfigError("label_iou must lie in (0, 1]");
    split.validate();
    synth.validate();
  }
};

namespace detail {

// Copies known keys of `obj` into the bound fields; any other key is an error.
class Section {
 public:
  Section(const Json& obj, std::string name) : obj_(obj), name_(std::move(name)) {
    if (!obj_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  Section& get(const char* key, T& target) {
    known_.insert(key);
    if (!obj_.contains(key)) return *this;
    try {
      target = obj_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
    }
    return *this;
  }

  Section& sub(const char* key, const std::function<void(const Json&, const std::string&)>& read) {
    known_.insert(key);
    if (obj_.contains(key)) read(obj_.at(key), name_.empty() ? key : name_ + "." + key);
    return *this;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items())
      if (!known_.contains(key)) throw ConfigError("unknown config key '" + (name_.empty() ? key : name_ + "." + key) + "'");
  }

 private:
  const Json& obj_;
  std::string name_;
  std::set<std::string> known_;
};

inline Json range_json(const Range& r) { return Json::array({r.lo, r.hi}); }

inline Range range_from(const Json& j, const std::string& name) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError("config key '" + name + "' must be a [lo, hi] pair");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline std::string mode_name(CoherentMode m) { return m == CoherentMode::kSelected ? "selected" : "orthogonal_pair"; }

inline CoherentMode mode_from(const std::string& s) {
  if (s == "selected") return CoherentMode::kSelected;
  if (s == "orthogonal_pair") return CoherentMode::kOrthogonalPair;
  throw ConfigError("cst.coherent_mode must be 'selected' or 'orthogonal_pair'");
}

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  Json shapes = Json::array();
  for (const auto& s : c.synth.shapes)
    shapes.push_back({{"label", s.label},
                      {"kind", to_string(s.kind)},
                      {"intensity", detail::range_json(s.intensity)},
                      {"size", detail::range_json(s.size)}});
  return Json{
      {"seed", c.seed},
      {"jobs", c.jobs},
      {"enhance",
       {{"enabled", c.enhance.enabled},
        {"grid_rows", c.enhance.grid_rows},
        {"grid_cols", c.enhance.grid_cols},
        {"clip_limit", c.enhance.equalize.clip_limit},
        {"literal_denominator", c.enhance.equalize.literal_denominator}}},
      {"cst",
       {{"orientations", c.cst.orientations},
        {"window_size", c.cst.window_size},
        {"sigma", c.cst.sigma},
        {"scaling", c.cst.scaling},
        {"decay", c.cst.decay},
        {"sigma_floor", c.cst.sigma_floor},
        {"coherent_mode", detail::mode_name(c.cst.coherent_mode)},
        {"min_area", c.cst.min_area},
        {"max_iterations", c.cst.max_iterations},
        {"min_proposal_width", c.cst.min_proposal_width},
        {"min_proposal_height", c.cst.min_proposal_height},
        {"max_proposal_fraction", c.cst.max_proposal_fraction},
        {"dedup_iou", c.cst.dedup_iou},
        {"min_transition", c.cst.min_transition},
        {"split_enclosed", c.cst.split_enclosed},
        {"interior_fraction", c.cst.interior_fraction},
        {"min_face_area", c.cst.min_face_area},
        {"box_trim", c.cst.box_trim}}},
      {"features", {{"thumb", c.features.thumb}, {"bins", c.features.bins}}},
      {"training",
       {{"learning_rate", c.training.learning_rate},
        {"momentum", c.training.momentum},
        {"epochs", c.training.epochs},
        {"batch_size", c.training.batch_size},
        {"lr_decay", c.training.lr_decay},
        {"decay_period", c.training.decay_period}}},
      {"evaluation",
       {{"unit", to_string(c.evaluation.unit)},
        {"iou_threshold", c.evaluation.iou_threshold},
        {"label_iou", c.evaluation.label_iou}}},
      {"split",
       {{"train_fraction", c.split.train_fraction},
        {"test_fraction", c.split.test_fraction},
        {"stratify", c.split.stratify}}},
      {"synth",
       {{"rows", c.synth.rows},
        {"cols", c.synth.cols},
        {"max_level", c.synth.max_level},
        {"background_level", c.synth.background_level},
        {"texture_amplitude", c.synth.texture_amplitude},
        {"texture_period", detail::range_json(c.synth.texture_period)},
        {"noise_sigma", c.synth.noise_sigma},
        {"blur_sigma", c.synth.blur_sigma},
        {"min_objects", c.synth.min_objects},
        {"max_objects", c.synth.max_objects},
        {"max_overlap", c.synth.max_overlap},
        {"min_separation", c.synth.min_separation},
        {"max_attempts", c.synth.max_attempts},
        {"shapes", std::move(shapes)}}},
      {"dump_tensors", c.dump_tensors.generic_string()}};
}

/// Overlays the keys present in `j` on `base`. Unknown keys are rejected.
inline RunConfig config_from_json(const Json& j, RunConfig base = {}) {
  RunConfig c = std::move(base);
  std::uint64_t seed = c.seed;
  std::string dump = c.dump_tensors.generic_string();
  detail::Section(j, "")
      .get("seed", seed)
      .get("jobs", c.jobs)
      .get("dump_tensors", dump)
      .sub("enhance",
           [&](const Json& s, const std::string& n) {
             detail::Section(s, n)
                 .get("enabled", c.enhance.enabled)
                 .get("grid_rows", c.enhance.grid_rows)
                 .get("grid_cols", c.enhance.grid_cols)
                 .get("clip_limit", c.enhance.equalize.clip_limit)
                 .get("literal_denominator", c.enhance.equalize.literal_denominator)
                 .finish();
           })
      .sub("cst",
           [&](const Json& s, const std::string& n) {
             std::string mode = detail::mode_name(c.cst.coherent_mode);
             detail::Section(s, n)
                 .get("orientations", c.cst.orientations)
                 .get("window_size", c.cst.window_size)
                 .get("sigma", c.cst.sigma)
                 .get("scaling", c.cst.scaling)
                 .get("decay", c.cst.decay)
                 .get("sigma_floor", c.cst.sigma_floor)
                 .get("coherent_mode", mode)
                 .get("min_area", c.cst.min_area)
                 .get("max_iterations", c.cst.max_iterations)
                 .get("min_proposal_width", c.cst.min_proposal_width)
                 .get("min_proposal_height", c.cst.min_proposal_height)
                 .get("max_proposal_fraction", c.cst.max_proposal_fraction)
                 .get("dedup_iou", c.cst.dedup_iou)
                 .get("min_transition", c.cst.min_transition)
                 .get("split_enclosed", c.cst.split_enclosed)
                 .get("interior_fraction", c.cst.interior_fraction)
                 .get("min_face_area", c.cst.min_face_area)
                 .get("box_trim", c.cst.box_trim)
                 .finish();
             c.cst.coherent_mode = detail::mode_from(mode);
           })
      .sub("features",
           [&](const Json& s, const std::string& n) {
             detail::Section(s, n).get("thumb", c.features.thumb).get("bins", c.features.bins).finish();
           })
      .sub("training",
           [&](const Json& s, const std::string& n) {
             detail::Section(s, n)
                 .get("learning_rate", c.training.learning_rate)
                 .get("momentum", c.training.momentum)
                 .get("epochs", c.training.epochs)
                 .get("batch_size", c.training.batch_size)
                 .get("lr_decay", c.training.lr_decay)
                 .get("decay_period", c.training.decay_period)
                 .finish();
           })
      .sub("evaluation",
           [&](const Json& s, const std::string& n) {
             std::string unit = to_string(c.evaluation.unit);
             detail::Section(s, n)
                 .get("unit", unit)
                 .get("iou_threshold", c.evaluation.iou_threshold)
                 .get("label_iou", c.evaluation.label_iou)
                 .finish();
             c.evaluation.unit = eval_unit_from_string(unit);
           })
      .sub("split",
           [&](const Json& s, const std::string& n) {
             detail::Section(s, n)
                 .get("train_fraction", c.split.train_fraction)
                 .get("test_fraction", c.split.test_fraction)
                 .get("stratify", c.split.stratify)
                 .finish();
           })
      .sub("synth",
           [&](const Json& s, const std::string& n) {
             detail::Section(s, n)
                 .get("rows", c.synth.rows)
                 .get("cols", c.synth.cols)
                 .get("max_level", c.synth.max_level)
                 .get("background_level", c.synth.background_level)
                 .get("texture_amplitude", c.synth.texture_amplitude)
                 .sub("texture_period",
                      [&](const Json& r, const std::string& rn) { c.synth.texture_period = detail::range_from(r, rn); })
                 .get("noise_sigma", c.synth.noise_sigma)
                 .get("blur_sigma", c.synth.blur_sigma)
                 .get("min_objects", c.synth.min_objects)
                 .get("max_objects", c.synth.max_objects)
                 .get("max_overlap", c.synth.max_overlap)
                 .get("min_separation", c.synth.min_separation)
                 .get("max_attempts", c.synth.max_attempts)
                 .sub("shapes",
                      [&](const Json& arr, const std::string& an) {
                        if (!arr.is_array()) throw ConfigError("config key '" + an + "' must be an array");
                        c.synth.shapes.clear();
                        for (std::size_t i = 0; i < arr.size(); ++i) {
                          const std::string en = an + "[" + std::to_string(i) + "]";
                          ShapeClass sc;
                          std::string kind = to_string(sc.kind);
                          detail::Section(arr[i], en)
                              .get("label", sc.label)
                              .get("kind", kind)
                              .sub("intensity", [&](const Json& r, const std::string& rn) { sc.intensity = detail::range_from(r, rn); })
                              .sub("size", [&](const Json& r, const std::string& rn) { sc.size = detail::range_from(r, rn); })
                              .finish();
                          sc.kind = shape_kind_from_string(kind);
                          if (sc.label.empty()) throw ConfigError(en + " needs a label");
                          c.synth.shapes.push_back(std::move(sc));
                        }
                      })
                 .finish();
           })
      .finish();
  c.dump_tensors = dump;
  c.reseed(seed);
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  const std::string text = cst::detail::read_text(path);
  try {
    return config_from_json(cst::detail::parse_json(text));
  } catch (const ParseError& e) {
    throw e.in(path.string());
  }
}

inline void write_effective_config(const RunConfig& config, const fs::path& dir) {
  cst::detail::write_text(dir / "config.json", to_json(config).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Helpers

/// Runs task(i) for i in [0, n) on `jobs` threads. Returns the error message
/// of every failed index (empty string for successes).
inline std::vector<std::string> parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task) {
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        task(i);
      } catch (const std::exception& e) {
        errors[i] = e.what();
        if (errors[i].empty()) errors[i] = "unknown error";
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, n));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return errors;
}

inline DatasetManifest select_subset(const DatasetManifest& m, const RunConfig& config, Subset subset) {
  if (subset == Subset::kAll) return m;
  const auto split = make_split(m, config.split, config.split.stratify ? load_manifest_annotations(m)
                                                                        : std::vector<AnnotationRecord>{});
  return subset_manifest(m, subset == Subset::kTrain ? split.train : split.test);
}

/// The image the cascade runs on (and that crops are cut from).
inline GrayImage prepare_scan(const GrayImage& raw, const RunConfig& config) {
  if (!config.enhance.enabled) return raw;
  return equalize_adaptive(raw, config.enhance.grid_rows, config.enhance.grid_cols, config.enhance.equalize);
}

inline std::vector<std::string> catalog_labels(const DatasetManifest& m) {
  std::vector<std::string> labels = m.classes;
  labels.push_back(kNormalLabel);
  return labels;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// synth

struct SynthSummary {
  DatasetManifest manifest;
  std::size_t failures = 0;
};

inline SynthSummary cmd_synth(const RunConfig& config, std::size_t count, const fs::path& out) {
  config.validate();
  fs::create_directories(out);
  write_effective_config(config, out);
  const auto data = write_synthetic_dataset(config.synth, count, out);
  for (const auto& f : data.failures) spdlog::error("{}: {}", f.source_id, f.reason);
  spdlog::info("wrote {} scans to {}", data.manifest.entries.size(), out.string());
  return {data.manifest, data.failures.size()};
}

// ---------------------------------------------------------------------------
// extract

struct ScanProposals {
  std::string source_id;
  std::vector<Proposal> proposals;
  std::vector<std::string> labels;  // empty without annotations
  double seconds = 0.0;
  std::string error;
};

struct ExtractSummary {
  std::vector<ScanProposals> scans;  // sorted by source id
  std::size_t failures = 0;

  std::size_t proposal_count() const {
    std::size_t n = 0;
    for (const auto& s : scans) n += s.proposals.size();
    return n;
  }
};

namespace detail {

inline void dump_cascade(const fs::path& dir, const std::string& source_id, std::size_t iteration,
                         const TensorCascade& cascade, const CoherentChoice& choice) {
  const std::string stem = source_id + "_pass" + std::to_string(iteration);
  write_png(dir / (stem + "_coherent.png"), normalized_for_display(cascade.maps[choice.index].values));
  Json strengths = Json::array();
  for (const auto& m : cascade.maps) strengths.push_back(top_singular_value(m.values));
  cst::detail::write_text(dir / (stem + ".json"),
                          Json{{"source_id", source_id},
                               {"iteration", iteration},
                               {"selected", choice.index},
                               {"strengths", std::move(strengths)}}
                                  .dump() +
                              "\n");
}

}  // namespace detail

/// Extraction over every manifest entry. Proposals are labelled against the
/// manifest annotations when it has any. Failed scans are logged and skipped.
inline ExtractSummary extract_manifest(const RunConfig& config, const DatasetManifest& manifest) {
  config.validate();
  std::vector<AnnotationRecord> annotations;
  if (!manifest.annotation_files.empty()) annotations = load_manifest_annotations(manifest);
  std::map<std::string, std::vector<AnnotationRecord>> by_source;
  for (const auto& a : annotations) by_source[a.source_id].push_back(a);
  if (!config.dump_tensors.empty()) fs::create_directories(config.dump_tensors);

  ExtractSummary summary;
  summary.scans.resize(manifest.entries.size());
  const auto errors = parallel_for(manifest.entries.size(), config.jobs, [&](std::size_t i) {
    const auto& entry = manifest.entries[i];
    auto& out = summary.scans[i];
    out.source_id = entry.source_id;
    const auto start = std::chrono::steady_clock::now();
    const GrayImage scan = prepare_scan(to_grayscale(read_image(manifest.image_path(entry))), config);
    CascadeObserver observer;
    if (!config.dump_tensors.empty())
      observer = [&](std::size_t it, const TensorCascade& c, const CoherentChoice& ch) {
        detail::dump_cascade(config.dump_tensors, entry.source_id, it, c, ch);
      };
    out.proposals = extract_proposals_traced(scan, config.cst, entry.source_id, observer).proposals;
    out.seconds = seconds_since(start);
    if (!annotations.empty()) {
      const auto& truth = by_source[entry.source_id];
      for (const auto& p : out.proposals)
        out.labels.push_back(label_for_box(p.box, entry.source_id, truth, config.evaluation.label_iou));
    }
  });
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (errors[i].empty()) continue;
    summary.scans[i].error = errors[i];
    summary.scans[i].proposals.clear();
    summary.scans[i].labels.clear();
    ++summary.failures;
    spdlog::error("{}: {}", summary.scans[i].source_id, errors[i]);
  }
  std::stable_sort(summary.scans.begin(), summary.scans.end(),
                   [](const ScanProposals& a, const ScanProposals& b) { return a.source_id < b.source_id; });
  return summary;
}

inline void write_proposal_set(const ExtractSummary& summary, const fs::path& dir) {
  std::vector<Proposal> proposals;
  std::vector<std::string> labels;
  bool labelled = false;
  for (const auto& s : summary.scans) {
    proposals.insert(proposals.end(), s.proposals.begin(), s.proposals.end());
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    labelled = labelled || !s.labels.empty();
  }
  if (labelled && labels.size() != proposals.size()) throw DimensionError("some scans lack proposal labels");
  export_proposals(proposals, labelled ? labels : std::vector<std::string>{}, dir);
}

inline ExtractSummary cmd_extract(const RunConfig& config, const DatasetManifest& manifest, const fs::path& out,
                                  std::ostream& report = std::cout) {
  fs::create_directories(out);
  write_effective_config(config, out);
  auto summary = extract_manifest(config, manifest);
  write_proposal_set(summary, out / "proposals");
  for (const auto& s : summary.scans)
    if (s.error.empty()) report << s.source_id << '\t' << s.proposals.size() << '\n';
  spdlog::info("{} proposals from {} scans ({} failed)", summary.proposal_count(), summary.scans.size(), summary.failures);
  return summary;
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  LabelSet labels;
  std::size_t samples = 0;  // after balancing
  std::size_t available = 0;
  std::vector<EpochStats> history;
};

/// Label catalog of a labelled proposal set: "normal" first, then the
/// suspicious labels in sorted order.
inline LabelSet labels_of(const std::vector<LabeledProposal>& set) {
  std::set<std::string> names;
  for (const auto& p : set) {
    if (p.label.empty()) throw TrainingDataError("proposal set is not labelled");
    if (p.label != kNormalLabel) names.insert(p.label);
  }
  return LabelSet::with_normal({names.begin(), names.end()});
}

inline ClassifierModel train_on_set(const RunConfig& config, const std::vector<LabeledProposal>& set,
                                    TrainSummary* summary = nullptr) {
  config.validate();
  if (set.empty()) throw TrainingDataError("proposal set is empty");
  std::set<std::string> distinct;
  for (const auto& p : set) distinct.insert(p.label);
  if (distinct.size() < 2) throw TrainingDataError("training needs at least two classes, found " + std::to_string(distinct.size()));
  const LabelSet labels = labels_of(set);
  const auto balanced = balance_training_set(set, [](const LabeledProposal& p) { return p.label; }, config.training.seed);
  std::vector<LabeledSample> samples;
  samples.reserve(balanced.size());
  for (const auto& p : balanced) samples.push_back({extract_features(p.proposal, config.features), labels.find(p.label).id});
  std::vector<EpochStats> history;
  auto model = train(samples, labels, config.training, config.features, &history);
  if (summary) *summary = {labels, samples.size(), set.size(), std::move(history)};
  return model;
}

inline TrainSummary cmd_train(const RunConfig& config, const fs::path& proposals, const fs::path& model_path,
                              std::ostream& report = std::cout) {
  const auto set = load_proposal_set(proposals);
  TrainSummary summary;
  const auto model = train_on_set(config, set, &summary);
  save_model(model, model_path);
  write_effective_config(config, model_path.has_parent_path() ? model_path.parent_path() : fs::path("."));
  if (!summary.history.empty()) {
    const auto& last = summary.history.back();
    report << "final epoch loss " << last.mean_loss << ", training accuracy " << last.accuracy << '\n';
  }
  spdlog::info("trained on {} of {} proposals, {} classes", summary.samples, summary.available, summary.labels.size());
  return summary;
}

// ---------------------------------------------------------------------------
// classify

struct Classified {
  DetectionRecord detection;
  bool filtered = false;  // predicted "normal"
};

inline Json detection_json(const Classified& c) {
  const auto& d = c.detection;
  return Json{{"source_id", d.source_id}, {"label", d.label},         {"score", d.score},
              {"x_min", d.box.x_min},     {"y_min", d.box.y_min},     {"width", d.box.width},
              {"height", d.box.height},   {"filtered", c.filtered}};
}

inline std::string detections_to_jsonl(const std::vector<Classified>& detections) {
  std::string out;
  for (const auto& d : detections) out += detection_json(d).dump() + "\n";
  return out;
}

inline std::vector<Classified> parse_detections(const std::string& text) {
  std::vector<Classified> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const Json j = cst::detail::parse_json(line, n);
    Classified c;
    c.detection = {cst::detail::field<std::string>(j, "source_id", n),
                   {cst::detail::field<std::int64_t>(j, "x_min", n), cst::detail::field<std::int64_t>(j, "y_min", n),
                    cst::detail::field<std::int64_t>(j, "width", n), cst::detail::field<std::int64_t>(j, "height", n)},
                   cst::detail::field<std::string>(j, "label", n),
                   cst::detail::field<double>(j, "score", n)};
    if (j.contains("filtered")) c.filtered = cst::detail::field<bool>(j, "filtered", n);
    try {
      c.detection.validate();
    } catch (const DomainError& e) {
      throw ParseError(e.what(), n);
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<Classified> read_detections(const fs::path& path) {
  try {
    return parse_detections(cst::detail::read_text(path));
  } catch (const ParseError& e) {
    throw e.in(path.string());
  }
}

inline void check_feature_spec(const RunConfig& config, const ClassifierModel& model) {
  if (!(config.features == model.spec))
    throw VersionError("model features (thumb " + std::to_string(model.spec.thumb) + ", bins " +
                       std::to_string(model.spec.bins) + ") do not match the configured features (thumb " +
                       std::to_string(config.features.thumb) + ", bins " + std::to_string(config.features.bins) + ")");
}

inline Classified classify_one(const ClassifierModel& model, const Proposal& p) {
  const auto pred = predict(model, p);
  return {{p.source_id, p.box, pred.label.name, pred.score()}, pred.label.name == kNormalLabel};
}

inline std::vector<Classified> cmd_classify(const RunConfig& config, const fs::path& model_path, const fs::path& proposals,
                                            const fs::path& out) {
  const auto model = load_model(model_path);
  check_feature_spec(config, model);
  const auto set = load_proposal_set(proposals);
  std::vector<Classified> result(set.size());
  const auto errors = parallel_for(set.size(), config.jobs, [&](std::size_t i) { result[i] = classify_one(model, set[i].proposal); });
  for (const auto& e : errors)
    if (!e.empty()) throw FeatureError(e);
  cst::detail::write_text(out, detections_to_jsonl(result));
  if (out.has_parent_path()) write_effective_config(config, out.parent_path());
  spdlog::info("classified {} proposals", result.size());
  return result;
}

// ---------------------------------------------------------------------------
// evaluate

inline Json rate_json(const Rate& r) { return r.defined ? Json(r.value) : Json(nullptr); }

inline Json report_json(const EvaluationReport& r) {
  Json classes = Json::object();
  for (const auto& c : r.classes)
    classes[c.label] = Json{{"average_precision", c.average_precision},
                       {"auc", c.auc},
                       {"precision", rate_json(c.precision)},
                       {"recall", rate_json(c.recall)},
                       {"f1", rate_json(c.f1)},
                       {"fpr", rate_json(c.fpr)},
                       {"accuracy", rate_json(c.accuracy)},
                       {"tp", c.counts.tp},
                       {"fp", c.counts.fp},
                       {"tn", c.counts.tn},
                       {"fn", c.counts.fn},
                       {"ground_truths", c.ground_truths},
                       {"mean_iou", c.mean_iou},
                       {"degenerate_curves", c.pr.degenerate || c.roc.degenerate}};
  return Json{{"unit", to_string(r.unit)},   {"iou_threshold", r.iou_threshold}, {"mean_ap", r.mean_ap},
              {"mean_auc", r.mean_auc},      {"mean_f1", r.mean_f1},             {"classes", std::move(classes)}};
}

inline std::vector<GroundTruthBox> ground_truth_of(const DatasetManifest& m) {
  std::vector<GroundTruthBox> out;
  for (const auto& a : load_manifest_annotations(m)) out.push_back({a.source_id, a.box, a.label});
  return out;
}

inline std::map<std::string, std::pair<std::size_t, std::size_t>> scan_dims(const DatasetManifest& m) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> dims;
  for (const auto& e : m.entries) {
    if (e.rows && e.cols) {
      dims[e.source_id] = {*e.rows, *e.cols};
    } else {
      const auto img = read_image(m.image_path(e));
      dims[e.source_id] = {img.rows(), img.cols()};
    }
  }
  return dims;
}

/// Evaluates detections against the manifest's annotations, restricted to
/// the manifest's entries. Labels outside the catalog are rejected.
inline EvaluationReport evaluate_against(const RunConfig& config, const std::vector<Classified>& detections,
                                         const DatasetManifest& manifest) {
  const auto labels = catalog_labels(manifest);
  const std::set<std::string> known(labels.begin(), labels.end());
  std::set<std::string> unknown;
  std::vector<DetectionRecord> dets;
  for (const auto& c : detections) {
    if (!known.contains(c.detection.label)) unknown.insert(c.detection.label);
    if (!manifest.find(c.detection.source_id)) throw ValidationError("detection for unknown scan '" + c.detection.source_id + "'");
    dets.push_back(c.detection);
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
    throw ValidationError("detection labels outside the class catalog: " + list);
  }
  std::vector<GroundTruthBox> truth;
  for (const auto& g : ground_truth_of(manifest))
    if (manifest.find(g.source_id)) truth.push_back(g);
  const auto dims = config.evaluation.unit == EvalUnit::kPixels ? scan_dims(manifest)
                                                                : std::map<std::string, std::pair<std::size_t, std::size_t>>{};
  return evaluate(dets, truth, labels, config.evaluation.unit, config.evaluation.iou_threshold, dims);
}

inline void write_report(const EvaluationReport& report, const fs::path& out) {
  fs::create_directories(out / "curves");
  cst::detail::write_text(out / "report.json", report_json(report).dump(2) + "\n");
  for (const auto& c : report.classes) {
    for (const auto* curve : {&c.pr, &c.roc}) {
      const std::string stem = c.label + "_" + to_string(curve->kind);
      write_curve_csv(*curve, out / "curves" / (stem + ".csv"));
      write_curve_svg(*curve, out / "curves" / (stem + ".svg"), c.label + " " + (curve->kind == CurveKind::kPR ? "PR" : "ROC"));
    }
  }
}

inline EvaluationReport cmd_evaluate(const RunConfig& config, const fs::path& detections, const DatasetManifest& manifest,
                                     const fs::path& out, std::ostream& summary = std::cout) {
  config.validate();
  const auto report = evaluate_against(config, read_detections(detections), manifest);
  fs::create_directories(out);
  write_effective_config(config, out);
  write_report(report, out);
  for (const auto& c : report.classes)
    summary << c.label << "\tAP " << c.average_precision << "\tAUC " << c.auc << "\tF1 "
            << (c.f1.defined ? std::to_string(c.f1.value) : "n/a") << "\tmean IoU " << c.mean_iou << '\n';
  summary << "mean AP " << report.mean_ap << '\n';
  return report;
}

// ---------------------------------------------------------------------------
// pipeline

struct PipelineSummary {
  EvaluationReport report;
  std::vector<double> seconds_per_image;
  std::size_t proposals = 0;
  std::size_t failures = 0;

  double mean_seconds() const { return mean(seconds_per_image); }
  double median_seconds() const { return median(seconds_per_image); }
};

inline PipelineSummary run_pipeline(const RunConfig& config, const DatasetManifest& manifest, const ClassifierModel& model,
                                    const fs::path& out) {
  PipelineSummary summary;
  ExtractSummary extracted;
  std::vector<Classified> detections;
  try {
    check_feature_spec(config, model);
    extracted = extract_manifest(config, manifest);
    write_proposal_set(extracted, out / "proposals");
  } catch (const std::exception& e) {
    throw StageError("extract", e.what());
  }
  try {
    for (auto& scan : extracted.scans) {
      const auto start = std::chrono::steady_clock::now();
      for (const auto& p : scan.proposals) detections.push_back(classify_one(model, p));
      scan.seconds += seconds_since(start);
      if (scan.error.empty()) summary.seconds_per_image.push_back(scan.seconds);
    }
    cst::detail::write_text(out / "detections.jsonl", detections_to_jsonl(detections));
  } catch (const std::exception& e) {
    throw StageError("classify", e.what());
  }
  try {
    summary.report = evaluate_against(config, detections, manifest);
    write_report(summary.report, out);
  } catch (const std::exception& e) {
    throw StageError("evaluate", e.what());
  }
  summary.proposals = extracted.proposal_count();
  summary.failures = extracted.failures;
  return summary;
}

inline PipelineSummary cmd_pipeline(const RunConfig& config, const DatasetManifest& manifest, const fs::path& model_path,
                                    const fs::path& out, std::ostream& report = std::cout) {
  config.validate();
  fs::create_directories(out);
  write_effective_config(config, out);
  ClassifierModel model;
  try {
    model = load_model(model_path);
  } catch (const std::exception& e) {
    throw StageError("load model", e.what());
  }
  auto summary = run_pipeline(config, manifest, model, out);
  cst::detail::write_text(out / "timing.json",
                          Json{{"images", summary.seconds_per_image.size()},
                               {"proposals", summary.proposals},
                               {"failed_scans", summary.failures},
                               {"mean_seconds_per_image", summary.mean_seconds()},
                               {"median_seconds_per_image", summary.median_seconds()}}
                                  .dump(2) +
                              "\n");
  report << "mean AP " << summary.report.mean_ap << ", mean AUC " << summary.report.mean_auc << '\n'
         << "seconds per image: mean " << summary.mean_seconds() << ", median " << summary.median_seconds() << '\n';
  return summary;
}

}  // namespace cst::app
