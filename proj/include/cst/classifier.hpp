#pragma once

// Baseline proposal classifier: fixed appearance features and multinomial
// logistic regression trained by stochastic gradient descent with momentum.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cst/error.hpp"
#include "cst/image.hpp"
#include "cst/proposals.hpp"
#include "cst/rng.hpp"
#include "cst/structure_tensor.hpp"

namespace cst {

inline const std::string kNormalLabel = "normal";

struct ClassLabel {
  std::uint32_t id = 0;
  std::string name;
  friend bool operator==(const ClassLabel&, const ClassLabel&) = default;
};

/// Ordered class names; ids are positions. Always contains "normal".
class LabelSet {
 public:
  LabelSet() : LabelSet(std::vector<std::string>{kNormalLabel}) {}

  explicit LabelSet(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i].empty()) throw ValidationError("class names must be nonempty");
      if (!index_.emplace(names_[i], static_cast<std::uint32_t>(i)).second)
        throw ValidationError("duplicate class name '" + names_[i] + "'");
    }
    if (!index_.contains(kNormalLabel)) throw ValidationError("label set must contain '" + kNormalLabel + "'");
  }

  /// "normal" first, then the given names in order.
  static LabelSet with_normal(const std::vector<std::string>& suspicious) {
    std::vector<std::string> names{kNormalLabel};
    for (const auto& n : suspicious)
      if (n != kNormalLabel) names.push_back(n);
    return LabelSet(std::move(names));
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  ClassLabel operator[](std::uint32_t id) const {
    if (id >= names_.size()) throw LookupError("class id " + std::to_string(id) + " out of range");
    return {id, names_[id]};
  }
  ClassLabel find(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("unknown class '" + name + "'");
    return {it->second, name};
  }
  bool contains(const std::string& name) const { return index_.contains(name); }
  std::uint32_t normal_id() const { return index_.at(kNormalLabel); }

  friend bool operator==(const LabelSet& a, const LabelSet& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

// ---------------------------------------------------------------------------
// Features

struct FeatureSpec {
  std::uint32_t thumb = 32;  // side of the area-averaged thumbnail
  std::uint32_t bins = 8;    // gradient orientation bins
  std::size_t dimension() const { return static_cast<std::size_t>(thumb) * thumb + bins; }
  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

using FeatureVector = std::vector<double>;

/// Area-weighted resampling of `img` to side x side, values scaled to [0, 1].
inline std::vector<double> area_resize(const GrayImage& img, std::size_t side) {
  const double scale = 1.0 / static_cast<double>(img.max_level() - 1);
  const double fy = static_cast<double>(img.rows()) / static_cast<double>(side);
  const double fx = static_cast<double>(img.cols()) / static_cast<double>(side);
  // Per output cell, the source index range and fractional overlaps along one axis.
  struct Span { std::size_t first; std::vector<double> weights; };
  auto spans = [side](double f, std::size_t n) {
    std::vector<Span> out(side);
    for (std::size_t i = 0; i < side; ++i) {
      const double lo = static_cast<double>(i) * f, hi = static_cast<double>(i + 1) * f;
      const auto first = static_cast<std::size_t>(std::floor(lo));
      out[i].first = first;
      for (std::size_t s = first; s < n && static_cast<double>(s) < hi; ++s)
        out[i].weights.push_back(std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s)));
    }
    return out;
  };
  const auto ys = spans(fy, img.rows()), xs = spans(fx, img.cols());
  std::vector<double> out(side * side, 0.0);
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < ys[i].weights.size(); ++a)
        for (std::size_t b = 0; b < xs[j].weights.size(); ++b)
          acc += ys[i].weights[a] * xs[j].weights[b] * static_cast<double>(img(ys[i].first + a, xs[j].first + b));
      out[i * side + j] = acc / (fy * fx) * scale;
    }
  return out;
}

/// Thumbnail followed by a magnitude-weighted orientation histogram that sums
/// to 1 (all zeros when the crop has no gradient).
inline FeatureVector extract_features(const GrayImage& crop, const FeatureSpec& spec = {}) {
  if (crop.rows() < 4 || crop.cols() < 4)
    throw FeatureError("crop " + std::to_string(crop.rows()) + "x" + std::to_string(crop.cols()) +
                       " is smaller than 4x4");
  if (spec.thumb == 0 || spec.bins == 0) throw FeatureError("feature spec has a zero dimension");
  FeatureVector features = area_resize(crop, spec.thumb);
  std::vector<double> hist(spec.bins, 0.0);
  const auto [du, dv] = image_partials(crop);
  const double width = 2.0 * std::numbers::pi / spec.bins;
  double total = 0.0;
  for (std::size_t p = 0; p < du.size(); ++p) {
    const double gu = du.data()[p], gv = dv.data()[p];
    const double magnitude = std::hypot(gu, gv);
    if (magnitude == 0.0) continue;
    double angle = std::atan2(gv, gu);
    if (angle < 0) angle += 2.0 * std::numbers::pi;
    const auto bin = std::min<std::size_t>(spec.bins - 1, static_cast<std::size_t>(angle / width));
    hist[bin] += magnitude;
    total += magnitude;
  }
  for (double h : hist) features.push_back(total > 0 ? h / total : 0.0);
  return features;
}

inline FeatureVector extract_features(const Proposal& proposal, const FeatureSpec& spec = {}) {
  return extract_features(proposal.crop, spec);
}

// ---------------------------------------------------------------------------
// Model

/// Numerically stable softmax.
inline std::vector<double> softmax(std::span<const double> scores) {
  const double top = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) sum += out[i] = std::exp(scores[i] - top);
  for (double& v : out) v /= sum;
  return out;
}

/// First index of the maximum (lowest id wins ties).
inline std::uint32_t argmax(std::span<const double> values) {
  return static_cast<std::uint32_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

struct ClassifierModel {
  FeatureSpec spec;
  LabelSet labels;
  std::vector<double> weights;  // dimension x classes, row-major: weights[d * classes + c]
  std::vector<double> bias;

  ClassifierModel() = default;
  ClassifierModel(FeatureSpec s, LabelSet l)
      : spec(s), labels(std::move(l)), weights(spec.dimension() * labels.size(), 0.0), bias(labels.size(), 0.0) {}

  std::size_t dimension() const { return spec.dimension(); }
  std::size_t classes() const { return labels.size(); }

  void check() const {
    if (weights.size() != dimension() * classes() || bias.size() != classes())
      throw DimensionError("model weights do not match its feature dimension and class count");
  }

  std::vector<double> scores(std::span<const double> x) const {
    if (x.size() != dimension())
      throw DimensionError("feature length " + std::to_string(x.size()) + " does not match model dimension " +
                           std::to_string(dimension()));
    std::vector<double> s = bias;
    const std::size_t k = classes();
    for (std::size_t d = 0; d < x.size(); ++d) {
      if (x[d] == 0.0) continue;
      const double* row = &weights[d * k];
      for (std::size_t c = 0; c < k; ++c) s[c] += x[d] * row[c];
    }
    return s;
  }

  std::vector<double> probabilities(std::span<const double> x) const { return softmax(scores(x)); }

  friend bool operator==(const ClassifierModel&, const ClassifierModel&) = default;
};

struct Prediction {
  ClassLabel label;
  std::vector<double> probabilities;
  double score() const { return probabilities[label.id]; }
};

inline Prediction predict(const ClassifierModel& model, std::span<const double> features) {
  auto p = model.probabilities(features);
  const auto id = argmax(p);
  return {model.labels[id], std::move(p)};
}

inline Prediction predict(const ClassifierModel& model, const Proposal& proposal) {
  return predict(model, extract_features(proposal, model.spec));
}

// ---------------------------------------------------------------------------
// Loss and training

inline constexpr double kProbabilityFloor = 1e-12;

/// Summed cross-entropy over samples and classes. Rows must be probability
/// vectors (sum 1 within 1e-6); truth rows must be one-hot.
inline double cross_entropy(const std::vector<std::vector<double>>& predicted,
                            const std::vector<std::vector<double>>& truth) {
  if (predicted.size() != truth.size()) throw DomainError("prediction and truth row counts differ");
  double loss = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto& p = predicted[i];
    const auto& y = truth[i];
    if (p.empty() || p.size() != y.size()) throw DomainError("row " + std::to_string(i) + " has mismatched length");
    double psum = 0.0, ysum = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (!(p[j] >= 0.0) || p[j] > 1.0) throw DomainError("row " + std::to_string(i) + " has a value outside [0, 1]");
      if (y[j] != 0.0 && y[j] != 1.0) throw DomainError("truth row " + std::to_string(i) + " is not one-hot");
      psum += p[j];
      ysum += y[j];
    }
    if (std::abs(psum - 1.0) > 1e-6) throw DomainError("row " + std::to_string(i) + " does not sum to 1");
    if (ysum != 1.0) throw DomainError("truth row " + std::to_string(i) + " is not one-hot");
    for (std::size_t j = 0; j < p.size(); ++j)
      if (y[j] != 0.0) loss -= y[j] * std::log(std::max(p[j], kProbabilityFloor));
  }
  return loss;
}

struct LabeledSample {
  FeatureVector features;
  std::uint32_t label = 0;
};

struct Gradient {
  std::vector<double> weights;
  std::vector<double> bias;
};

/// Cross-entropy summed over `batch` and its gradient with respect to the
/// model's weights and biases.
inline double loss_and_gradient(const ClassifierModel& model, std::span<const LabeledSample> batch,
                                Gradient& grad) {
  const std::size_t k = model.classes();
  grad.weights.assign(model.weights.size(), 0.0);
  grad.bias.assign(k, 0.0);
  double loss = 0.0;
  for (const auto& s : batch) {
    if (s.label >= k) throw LookupError("sample label " + std::to_string(s.label) + " out of range");
    auto p = model.probabilities(s.features);
    loss -= std::log(std::max(p[s.label], kProbabilityFloor));
    p[s.label] -= 1.0;  // dL/dscore
    for (std::size_t c = 0; c < k; ++c) grad.bias[c] += p[c];
    for (std::size_t d = 0; d < s.features.size(); ++d) {
      const double x = s.features[d];
      if (x == 0.0) continue;
      double* row = &grad.weights[d * k];
      for (std::size_t c = 0; c < k; ++c) row[c] += x * p[c];
    }
  }
  return loss;
}

struct TrainingConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch_size = 1;
  double lr_decay = 0.5;
  std::size_t decay_period = 2;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must lie in (0, 1]");
    if (decay_period < 1) throw ConfigError("decay_period must be at least 1");
  }

  double rate_for_epoch(std::size_t epoch) const {
    return learning_rate * std::pow(lr_decay, static_cast<double>(epoch / decay_period));
  }
};

struct EpochStats {
  double mean_loss = 0.0;
  double accuracy = 0.0;  // on the training set after the epoch
};

/// Trains from zero weights. Every class in `labels` needs at least one
/// sample. Zero epochs returns the zero model.
inline ClassifierModel train(const std::vector<LabeledSample>& samples, const LabelSet& labels,
                             const TrainingConfig& config, const FeatureSpec& spec = {},
                             std::vector<EpochStats>* history = nullptr) {
  config.validate();
  std::vector<std::size_t> per_class(labels.size(), 0);
  for (const auto& s : samples) {
    if (s.label >= labels.size()) throw TrainingDataError("sample label id " + std::to_string(s.label) + " out of range");
    if (s.features.size() != spec.dimension())
      throw TrainingDataError("sample feature length " + std::to_string(s.features.size()) + " != " +
                              std::to_string(spec.dimension()));
    ++per_class[s.label];
  }
  std::string missing;
  for (std::size_t c = 0; c < per_class.size(); ++c)
    if (per_class[c] == 0) missing += (missing.empty() ? "" : ", ") + labels.names()[c];
  if (!missing.empty()) throw TrainingDataError("no training samples for: " + missing);

  ClassifierModel model(spec, labels);
  std::vector<double> vel_w(model.weights.size(), 0.0), vel_b(model.bias.size(), 0.0);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(config.seed);
  Gradient grad;
  std::vector<LabeledSample> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    const double rate = config.rate_for_epoch(epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(samples[order[i]]);
      epoch_loss += loss_and_gradient(model, batch, grad);
      const double step = rate / static_cast<double>(batch.size());
      for (std::size_t i = 0; i < model.weights.size(); ++i) {
        vel_w[i] = config.momentum * vel_w[i] - step * grad.weights[i];
        model.weights[i] += vel_w[i];
      }
      for (std::size_t i = 0; i < model.bias.size(); ++i) {
        vel_b[i] = config.momentum * vel_b[i] - step * grad.bias[i];
        model.bias[i] += vel_b[i];
      }
    }
    if (history) {
      std::size_t correct = 0;
      for (const auto& s : samples) correct += argmax(model.scores(s.features)) == s.label;
      history->push_back({epoch_loss / static_cast<double>(std::max<std::size_t>(1, samples.size())),
                          static_cast<double>(correct) / static_cast<double>(std::max<std::size_t>(1, samples.size()))});
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Balancing

/// Number of "normal" items kept for the given counts: all of them when they
/// do not outnumber the suspicious items, otherwise exactly as many.
inline std::size_t balanced_normal_count(std::size_t normal, std::size_t suspicious) {
  return std::min(normal, suspicious);
}

/// Uniformly subsamples items whose label is "normal" down to the suspicious
/// count. Suspicious items are always kept; relative order is preserved.
template <typename T, typename LabelOf>
std::vector<T> balance_training_set(const std::vector<T>& items, LabelOf label_of, std::uint64_t seed) {
  std::vector<std::size_t> normals;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (label_of(items[i]) == kNormalLabel) normals.push_back(i);
  const std::size_t keep = balanced_normal_count(normals.size(), items.size() - normals.size());
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(normals));
  std::vector<bool> drop(items.size(), false);
  for (std::size_t i = keep; i < normals.size(); ++i) drop[normals[i]] = true;
  std::vector<T> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i)
    if (!drop[i]) out.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Model file: "CSTM", u16 version, u32 thumb, u32 bins, u32 D, u32 classes,
// class names (u32 length + bytes), D x classes f64 weights, classes f64
// biases. Little-endian throughout.

inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}
  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw VersionError("model file " + path_ + " is truncated");
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_model(const ClassifierModel& model) {
  model.check();
  std::string out = "CSTM";
  detail::put_le<std::uint16_t>(out, kModelVersion);
  detail::put_le<std::uint32_t>(out, model.spec.thumb);
  detail::put_le<std::uint32_t>(out, model.spec.bins);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.dimension()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.classes()));
  for (const auto& name : model.labels.names()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
  }
  for (double w : model.weights) detail::put_le<double>(out, w);
  for (double b : model.bias) detail::put_le<double>(out, b);
  return out;
}

inline ClassifierModel deserialize_model(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 4 || bytes.compare(0, 4, "CSTM") != 0) throw VersionError(path + " is not a model file");
  detail::ByteReader in(bytes, path);
  in.get_bytes(4);
  const auto version = in.get<std::uint16_t>();
  if (version != kModelVersion)
    throw VersionError(path + " has model format version " + std::to_string(version) + ", expected " +
                       std::to_string(kModelVersion));
  FeatureSpec spec;
  spec.thumb = in.get<std::uint32_t>();
  spec.bins = in.get<std::uint32_t>();
  const auto dim = in.get<std::uint32_t>();
  const auto classes = in.get<std::uint32_t>();
  if (dim != spec.dimension()) throw VersionError(path + " declares a feature dimension inconsistent with its feature spec");
  if (classes == 0 || classes > 65536) throw VersionError(path + " declares an invalid class count");
  std::vector<std::string> names;
  for (std::uint32_t c = 0; c < classes; ++c) {
    const auto len = in.get<std::uint32_t>();
    names.push_back(in.get_bytes(len));
  }
  ClassifierModel model(spec, LabelSet(std::move(names)));
  for (double& w : model.weights) w = in.get<double>();
  for (double& b : model.bias) b = in.get<double>();
  if (!in.done()) throw VersionError(path + " has trailing bytes");
  return model;
}

inline void save_model(const ClassifierModel& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model", path.string());
  const auto bytes = serialize_model(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing model", path.string());
}

inline ClassifierModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model", path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes, path.string());
}

}  // namespace cst
