#pragma once

// Manifests, annotations, splits, proposal sets, and synthetic datasets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cst/error.hpp"
#include "cst/image.hpp"
#include "cst/image_io.hpp"
#include "cst/proposals.hpp"
#include "cst/raster.hpp"
#include "cst/rng.hpp"
#include "cst/synthetic.hpp"

namespace cst {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct AnnotationRecord {
  std::string source_id;
  std::string label;
  BoundingBox box;
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

struct ManifestEntry {
  std::string source_id;
  std::string image;                  // relative to the manifest root
  std::optional<std::size_t> rows;   // scan dimensions, when known
  std::optional<std::size_t> cols;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::string name;
  fs::path root;                          // absolute after loading
  std::vector<std::string> classes;       // suspicious classes; "normal" is implicit
  std::vector<std::string> annotation_files;  // JSON-lines, relative to root
  std::vector<ManifestEntry> entries;

  const ManifestEntry* find(const std::string& source_id) const {
    for (const auto& e : entries)
      if (e.source_id == source_id) return &e;
    return nullptr;
  }
  fs::path image_path(const ManifestEntry& e) const { return root / e.image; }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

namespace detail {

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write", path.string());
  out << text;
  if (!out) throw IoError("failed writing", path.string());
}

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

/// Parses `text` as JSON, reporting syntax errors with a 1-based line.
inline Json parse_json(const std::string& text, std::size_t line_base = 0) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t offset = e.byte > 0 ? e.byte - 1 : 0;
    throw ParseError(std::string("malformed JSON: ") + e.what(), line_base ? line_base : line_of_offset(text, offset));
  }
}

template <typename T>
T field(const Json& obj, const char* key, std::size_t line) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(std::string("missing field '") + key + "'", line);
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(std::string("field '") + key + "' has the wrong type", line);
  }
}

// Line of the first occurrence of `"key": "value"` in the raw text, for
// errors found after parsing.
inline std::size_t line_of_value(const std::string& text, const std::string& value) {
  const auto pos = text.find("\"" + value + "\"");
  return pos == std::string::npos ? 0 : line_of_offset(text, pos);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Annotations

inline Json annotation_to_json(const AnnotationRecord& a) {
  return Json{{"source_id", a.source_id}, {"label", a.label}, {"x_min", a.box.x_min},
              {"y_min", a.box.y_min},    {"width", a.box.width}, {"height", a.box.height}};
}

inline std::string annotations_to_jsonl(const std::vector<AnnotationRecord>& records) {
  std::string out;
  for (const auto& r : records) out += annotation_to_json(r).dump() + "\n";
  return out;
}

inline std::vector<AnnotationRecord> parse_annotations(const std::string& text) {
  std::vector<AnnotationRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const Json j = detail::parse_json(line, n);
    AnnotationRecord r{detail::field<std::string>(j, "source_id", n), detail::field<std::string>(j, "label", n),
                       {detail::field<std::int64_t>(j, "x_min", n), detail::field<std::int64_t>(j, "y_min", n),
                        detail::field<std::int64_t>(j, "width", n), detail::field<std::int64_t>(j, "height", n)}};
    if (r.box.empty() || r.box.x_min < 0 || r.box.y_min < 0) throw ParseError("annotation box is empty or negative", n);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<AnnotationRecord> read_annotations(const fs::path& path) {
  try {
    return parse_annotations(detail::read_text(path));
  } catch (const ParseError& e) {
    throw e.in(path.string());
  }
}

inline void write_annotations(const std::vector<AnnotationRecord>& records, const fs::path& path) {
  detail::write_text(path, annotations_to_jsonl(records));
}

// ---------------------------------------------------------------------------
// Manifest

inline Json manifest_to_json(const DatasetManifest& m, const fs::path& root_as = ".") {
  Json entries = Json::array();
  for (const auto& e : m.entries) {
    Json j{{"source_id", e.source_id}, {"image", e.image}};
    if (e.rows) j["rows"] = *e.rows;
    if (e.cols) j["cols"] = *e.cols;
    entries.push_back(std::move(j));
  }
  return Json{{"name", m.name},
              {"root", root_as.generic_string()},
              {"classes", m.classes},
              {"annotations", m.annotation_files},
              {"entries", std::move(entries)}};
}

/// Writes the manifest with its root expressed relative to the file's directory.
inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path dir = fs::absolute(path).parent_path();
  const fs::path root = m.root.empty() ? fs::path(".") : fs::relative(fs::absolute(m.root), dir);
  detail::write_text(path, manifest_to_json(m, root.empty() ? fs::path(".") : root).dump(2) + "\n");
}

/// Checks ids, dimensions, and that every annotation resolves to an entry,
/// lies inside the scan when its size is known, and names a catalog class.
inline void validate_annotations(const DatasetManifest& m, const std::vector<AnnotationRecord>& records) {
  std::set<std::string> classes(m.classes.begin(), m.classes.end());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto* e = m.find(r.source_id);
    const std::string where = "annotation " + std::to_string(i + 1) + " (" + r.source_id + ")";
    if (!e) throw ValidationError(where + " refers to no manifest entry");
    if (!classes.contains(r.label)) throw ValidationError(where + " has label '" + r.label + "' outside the class catalog");
    if (e->rows && e->cols &&
        !r.box.within(static_cast<std::int64_t>(*e->rows), static_cast<std::int64_t>(*e->cols)))
      throw ValidationError(where + " lies outside its " + std::to_string(*e->rows) + "x" + std::to_string(*e->cols) + " scan");
  }
}

inline DatasetManifest manifest_from_json(const Json& j, const std::string& text, const fs::path& base) {
  if (!j.is_object()) throw ParseError("manifest must be a JSON object", 1);
  DatasetManifest m;
  m.name = j.value("name", std::string{});
  m.root = fs::absolute(base / j.value("root", std::string{"."})).lexically_normal();
  if (j.contains("classes")) m.classes = detail::field<std::vector<std::string>>(j, "classes", 1);
  if (j.contains("annotations")) m.annotation_files = detail::field<std::vector<std::string>>(j, "annotations", 1);
  if (j.contains("entries")) {
    if (!j["entries"].is_array()) throw ParseError("'entries' must be an array", detail::line_of_value(text, "entries"));
    for (const auto& e : j["entries"]) {
      const std::size_t line = e.is_object() && e.contains("source_id") && e["source_id"].is_string()
                                   ? detail::line_of_value(text, e["source_id"].get<std::string>())
                                   : 0;
      ManifestEntry entry{detail::field<std::string>(e, "source_id", line), detail::field<std::string>(e, "image", line),
                          std::nullopt, std::nullopt};
      if (e.contains("rows")) entry.rows = detail::field<std::size_t>(e, "rows", line);
      if (e.contains("cols")) entry.cols = detail::field<std::size_t>(e, "cols", line);
      if (entry.source_id.empty()) throw ParseError("empty source_id", line);
      m.entries.push_back(std::move(entry));
    }
  }
  std::set<std::string> seen;
  for (const auto& e : m.entries)
    if (!seen.insert(e.source_id).second) throw ValidationError("duplicate source_id '" + e.source_id + "'");
  std::set<std::string> class_set;
  for (const auto& c : m.classes) {
    if (c == "normal") throw ValidationError("'normal' is implicit and must not be listed as a class");
    if (!class_set.insert(c).second) throw ValidationError("duplicate class '" + c + "'");
  }
  return m;
}

/// Loads and validates a manifest. With `check_files`, every image must exist
/// (the error lists all missing ids) and annotation files are validated.
inline DatasetManifest load_manifest(const fs::path& path, bool check_files = true) {
  const std::string text = detail::read_text(path);
  DatasetManifest m;
  try {
    m = manifest_from_json(detail::parse_json(text), text, fs::absolute(path).parent_path());
  } catch (const ParseError& e) {
    throw e.in(path.string());
  }
  if (check_files) {
    std::string missing;
    for (const auto& e : m.entries)
      if (!fs::exists(m.image_path(e))) missing += (missing.empty() ? "" : ", ") + e.source_id;
    if (!missing.empty()) throw ValidationError("missing image files for: " + missing);
    for (const auto& f : m.annotation_files) validate_annotations(m, read_annotations(m.root / f));
  }
  return m;
}

/// Annotations of the manifest's entries. Records for other source ids are
/// dropped, so a subset of a manifest sees only its own ground truth.
inline std::vector<AnnotationRecord> load_manifest_annotations(const DatasetManifest& m) {
  std::vector<AnnotationRecord> all;
  for (const auto& f : m.annotation_files)
    for (auto& r : read_annotations(m.root / f))
      if (m.find(r.source_id)) all.push_back(std::move(r));
  validate_annotations(m, all);
  return all;
}

// ---------------------------------------------------------------------------
// GDXray ground-truth tables

/// Rows of "x1 x2 y1 y2", optionally preceded by the image number. Corners
/// become inclusive boxes (x_min = floor(x1), width = ceil(x2) - x_min + 1).
/// Numbered rows are attributed to "<series>_<nnnn>", plain rows to `series`.
/// When `dims` knows a source's size, boxes must fit inside it.
inline std::vector<AnnotationRecord> parse_gdxray_table(
    std::istream& in, const std::string& series, const std::string& label,
    const std::map<std::string, std::pair<std::size_t, std::size_t>>& dims = {}) {
  std::vector<AnnotationRecord> out;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::vector<double> v;
    std::string tok;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("row " + std::to_string(row) + ": '" + tok + "' is not a number", row);
      }
    }
    if (v.empty()) continue;
    if (v.size() != 4 && v.size() != 5)
      throw ParseError("row " + std::to_string(row) + ": expected 4 or 5 numbers, found " + std::to_string(v.size()), row);
    std::string source = series;
    if (v.size() == 5) {
      std::ostringstream id;
      id << series << '_' << std::setw(4) << std::setfill('0') << static_cast<long long>(std::llround(v[0]));
      source = id.str();
      v.erase(v.begin());
    }
    const double x1 = v[0], x2 = v[1], y1 = v[2], y2 = v[3];
    if (x1 < 0 || y1 < 0 || x2 < x1 || y2 < y1)
      throw ValidationError("row " + std::to_string(row) + ": corners out of order or negative");
    const auto xmin = static_cast<std::int64_t>(std::floor(x1)), ymin = static_cast<std::int64_t>(std::floor(y1));
    const BoundingBox box{xmin, ymin, static_cast<std::int64_t>(std::ceil(x2)) - xmin + 1,
                          static_cast<std::int64_t>(std::ceil(y2)) - ymin + 1};
    if (const auto it = dims.find(source); it != dims.end())
      if (!box.within(static_cast<std::int64_t>(it->second.first), static_cast<std::int64_t>(it->second.second)))
        throw ValidationError("row " + std::to_string(row) + ": box lies outside " + source);
    out.push_back({source, label, box});
  }
  return out;
}

/// Imports a series directory (its ground_truth.txt) or a table file. The
/// series name is the directory name (or the file's parent directory name).
inline std::vector<AnnotationRecord> import_gdxray_annotations(
    const fs::path& series, const std::map<std::string, std::string>& series_labels,
    const std::map<std::string, std::pair<std::size_t, std::size_t>>& dims = {}) {
  const fs::path table = fs::is_directory(series) ? series / "ground_truth.txt" : series;
  const fs::path dir = fs::is_directory(series) ? series : series.parent_path();
  const std::string name = fs::absolute(dir).lexically_normal().filename().string();
  const auto label = series_labels.find(name);
  if (label == series_labels.end()) throw LookupError("no label configured for series '" + name + "'");
  std::ifstream in(table);
  if (!in) throw IoError("cannot open ground-truth table", table.string());
  try {
    return parse_gdxray_table(in, name, label->second, dims);
  } catch (const ParseError& e) {
    throw e.in(table.string());
  }
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double train_fraction = 0.8;
  double test_fraction = 0.2;
  std::uint64_t seed = 1;
  bool stratify = false;

  void validate() const {
    if (!(train_fraction > 0) || !(test_fraction > 0)) throw ConfigError("split fractions must be positive");
    if (std::abs(train_fraction + test_fraction - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  }
};

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Seeded shuffle and partition; both halves are listed in manifest order.
/// With stratification, entries are grouped by the most frequent label among
/// their annotations (ties to the alphabetically first, unannotated entries
/// form their own group) and each group is split separately.
inline Split make_split(const DatasetManifest& m, const SplitSpec& spec,
                        const std::vector<AnnotationRecord>& annotations = {}) {
  spec.validate();
  std::map<std::string, std::vector<std::size_t>> groups;
  if (spec.stratify) {
    std::map<std::string, std::map<std::string, std::size_t>> counts;
    for (const auto& a : annotations) ++counts[a.source_id][a.label];
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      std::string key;
      std::size_t best = 0;
      if (const auto it = counts.find(m.entries[i].source_id); it != counts.end())
        for (const auto& [label, n] : it->second)
          if (n > best) best = n, key = label;
      groups[key].push_back(i);
    }
  } else {
    for (std::size_t i = 0; i < m.entries.size(); ++i) groups[""].push_back(i);
  }
  Rng rng(spec.seed);
  std::vector<bool> in_train(m.entries.size(), false);
  for (auto& [key, members] : groups) {
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(members.size())));
    for (std::size_t i = 0; i < n_train && i < members.size(); ++i) in_train[members[i]] = true;
  }
  Split split;
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    (in_train[i] ? split.train : split.test).push_back(m.entries[i].source_id);
  return split;
}

// ---------------------------------------------------------------------------
// Proposal sets: one PNG per crop plus index.jsonl

struct LabeledProposal {
  Proposal proposal;
  std::string label;  // empty when unlabeled
};

/// Label of the annotation with the highest IoU against `box` (at least
/// `min_iou`), or "normal".
inline std::string label_for_box(const BoundingBox& box, const std::string& source_id,
                                 const std::vector<AnnotationRecord>& annotations, double min_iou = 0.5) {
  std::string label = "normal";
  double best = min_iou;
  bool found = false;
  for (const auto& a : annotations) {
    if (a.source_id != source_id) continue;
    const double v = iou(box, a.box);
    if (v > best || (!found && v >= best)) best = v, label = a.label, found = true;
  }
  return label;
}

/// Writes crops as `<index>.png` in order; `labels` is empty or one per proposal.
inline void export_proposals(const std::vector<Proposal>& proposals, const std::vector<std::string>& labels,
                             const fs::path& dir) {
  if (!labels.empty() && labels.size() != proposals.size())
    throw DimensionError("label count does not match proposal count");
  fs::create_directories(dir / "crops");
  std::string index;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto& p = proposals[i];
    std::ostringstream name;
    name << "crops/" << std::setw(6) << std::setfill('0') << i << ".png";
    write_png(dir / name.str(), p.crop);
    Json j{{"file", name.str()},          {"source_id", p.source_id}, {"x_min", p.box.x_min},
           {"y_min", p.box.y_min},        {"width", p.box.width},     {"height", p.box.height},
           {"iteration", p.iteration},    {"max_level", p.crop.max_level()}};
    if (!labels.empty()) j["label"] = labels[i];
    index += j.dump() + "\n";
  }
  detail::write_text(dir / "index.jsonl", index);
}

inline void export_proposals(const std::vector<LabeledProposal>& set, const fs::path& dir) {
  std::vector<Proposal> proposals;
  std::vector<std::string> labels;
  bool any_label = false;
  for (const auto& lp : set) {
    proposals.push_back(lp.proposal);
    labels.push_back(lp.label);
    any_label = any_label || !lp.label.empty();
  }
  export_proposals(proposals, any_label ? labels : std::vector<std::string>{}, dir);
}

inline std::vector<LabeledProposal> load_proposal_set(const fs::path& dir) {
  const fs::path index = dir / "index.jsonl";
  const std::string text = detail::read_text(index);
  std::vector<LabeledProposal> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Json j = detail::parse_json(line, n);
      const fs::path file = dir / detail::field<std::string>(j, "file", n);
      const auto max_level = detail::field<std::uint32_t>(j, "max_level", n);
      GrayImage raw = read_image(file);
      LabeledProposal lp;
      lp.proposal.crop = GrayImage(raw.pixels(), max_level);
      lp.proposal.box = {detail::field<std::int64_t>(j, "x_min", n), detail::field<std::int64_t>(j, "y_min", n),
                         detail::field<std::int64_t>(j, "width", n), detail::field<std::int64_t>(j, "height", n)};
      lp.proposal.iteration = detail::field<std::size_t>(j, "iteration", n);
      lp.proposal.source_id = detail::field<std::string>(j, "source_id", n);
      if (j.contains("label")) lp.label = detail::field<std::string>(j, "label", n);
      if (lp.proposal.crop.rows() != static_cast<std::size_t>(lp.proposal.box.height) ||
          lp.proposal.crop.cols() != static_cast<std::size_t>(lp.proposal.box.width))
        throw ParseError("crop size does not match its box", n);
      out.push_back(std::move(lp));
    } catch (const ParseError& e) {
      throw e.in(index.string());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic datasets

inline std::vector<AnnotationRecord> synthetic_annotations(const SynthScan& scan, const std::string& source_id) {
  std::vector<AnnotationRecord> out;
  for (const auto& o : scan.objects) out.push_back({source_id, o.label, o.box});
  return out;
}

/// Seed of scan `index` in a dataset generated from `seed`.
inline std::uint64_t scan_seed(std::uint64_t seed, std::size_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::string synthetic_source_id(std::size_t index) {
  std::ostringstream id;
  id << "synth_" << std::setw(5) << std::setfill('0') << index;
  return id.str();
}

struct SynthFailure {
  std::string source_id;
  std::string reason;
};

struct SynthDataset {
  DatasetManifest manifest;
  std::vector<SynthFailure> failures;  // scans that could not be placed; left out of the manifest
};

/// Writes `count` scans under dir/images, their annotations to
/// dir/annotations.jsonl, and dir/manifest.json.
inline SynthDataset write_synthetic_dataset(const SynthSpec& spec, std::size_t count, const fs::path& dir,
                                            const std::string& name = "synthetic") {
  spec.validate();
  SynthDataset out;
  DatasetManifest& m = out.manifest;
  m.name = name;
  m.root = fs::absolute(dir);
  for (const auto& c : spec.shapes)
    if (std::find(m.classes.begin(), m.classes.end(), c.label) == m.classes.end()) m.classes.push_back(c.label);
  m.annotation_files = {"annotations.jsonl"};
  std::vector<AnnotationRecord> annotations;
  for (std::size_t i = 0; i < count; ++i) {
    SynthSpec s = spec;
    s.seed = scan_seed(spec.seed, i);
    const std::string id = synthetic_source_id(i);
    SynthScan scan;
    try {
      scan = generate_synthetic(s);
    } catch (const PlacementError& e) {
      out.failures.push_back({id, e.what()});
      continue;
    }
    const std::string image = "images/" + id + ".png";
    write_png(dir / image, scan.image);
    m.entries.push_back({id, image, spec.rows, spec.cols});
    const auto part = synthetic_annotations(scan, id);
    annotations.insert(annotations.end(), part.begin(), part.end());
  }
  write_annotations(annotations, dir / "annotations.jsonl");
  save_manifest(m, dir / "manifest.json");
  return out;
}

/// Entries whose ids are listed, in manifest order. Unknown ids throw.
inline DatasetManifest subset_manifest(const DatasetManifest& m, const std::vector<std::string>& ids) {
  std::set<std::string> wanted(ids.begin(), ids.end());
  for (const auto& id : wanted)
    if (!m.find(id)) throw LookupError("no manifest entry '" + id + "'");
  DatasetManifest out = m;
  out.entries.clear();
  for (const auto& e : m.entries)
    if (wanted.contains(e.source_id)) out.entries.push_back(e);
  return out;
}

}  // namespace cst
