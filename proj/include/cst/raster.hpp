#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cst/error.hpp"

namespace cst {

/// Axis-aligned pixel rectangle. Spans are inclusive: a single pixel has
/// width == height == 1, and x/y name the column/row of the top-left pixel.
struct BoundingBox {
  std::int64_t x_min = 0;
  std::int64_t y_min = 0;
  std::int64_t width = 0;
  std::int64_t height = 0;

  std::int64_t x_max() const { return x_min + width - 1; }
  std::int64_t y_max() const { return y_min + height - 1; }
  std::int64_t area() const { return width * height; }
  bool empty() const { return width <= 0 || height <= 0; }
  bool within(std::int64_t rows, std::int64_t cols) const {
    return !empty() && x_min >= 0 && y_min >= 0 && x_max() < cols && y_max() < rows;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Intersection over union of inclusive-span boxes; 0 when either is empty
/// or they are disjoint.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  if (a.empty() || b.empty()) return 0.0;
  const auto x0 = std::max(a.x_min, b.x_min), x1 = std::min(a.x_max(), b.x_max());
  const auto y0 = std::max(a.y_min, b.y_min), y1 = std::min(a.y_max(), b.y_max());
  if (x1 < x0 || y1 < y0) return 0.0;
  const double inter = static_cast<double>((x1 - x0 + 1) * (y1 - y0 + 1));
  return inter / (static_cast<double>(a.area() + b.area()) - inter);
}

/// Dense row-major 2-D array.
template <typename T>
class Raster {
 public:
  using value_type = T;

  Raster() = default;
  Raster(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Raster(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionError("raster data length " + std::to_string(data_.size()) +
                           " does not match " + std::to_string(rows_) + "x" +
                           std::to_string(cols_));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const auto& other) const {
    return rows_ == other.rows() && cols_ == other.cols();
  }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using RealRaster = Raster<double>;

}  // namespace cst
