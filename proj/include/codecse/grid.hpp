#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "codecse/error.hpp"

namespace codecse {

// Row-major L x C grid. Rows index frames, columns index codebook stages.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Grid(std::size_t rows, std::size_t cols, std::vector<T> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    require(values_.size() == rows_ * cols_, ErrorKind::kShape,
            "grid data length does not match " + std::to_string(rows_) + "x" +
                std::to_string(cols_));
  }
  static Grid from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> values;
    for (const auto& row : rows) {
      require(row.size() == c, ErrorKind::kShape, "ragged grid rows");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Grid(r, c, std::move(values));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }

  bool same_shape_as(std::size_t rows, std::size_t cols) const {
    return rows_ == rows && cols_ == cols;
  }
  template <typename U>
  bool same_shape(const Grid<U>& other) const {
    return rows_ == other.rows() && cols_ == other.cols();
  }

  bool operator==(const Grid& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> values_;
};

// Token indices in {0, ..., D}; D is the mask token.
using TokenGrid = Grid<int>;
using MaskGrid = Grid<std::uint8_t>;
// Per-frame, per-stage mean squared quantization residual.
using QuantErrorGrid = Grid<double>;
using ConfidenceGrid = Grid<double>;

inline std::size_t popcount(const MaskGrid& mask) {
  std::size_t n = 0;
  for (auto bit : mask.values()) n += bit ? 1 : 0;
  return n;
}

inline std::string grid_shape(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace codecse
