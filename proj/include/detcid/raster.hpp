#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "detcid/error.hpp"

namespace detcid {

/// Row-major 2-D grid. Coordinates: x = column, y = row, origin top-left.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(int rows, int cols, T fill = T{})
      : rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(check_dim(rows)) * check_dim(cols), fill) {}
  Raster(int rows, int cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows < 0 || cols < 0 ||
        data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
      throw Error(ErrorCode::kShape, "raster data does not match its dimensions");
    }
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int y, int x) { return data_[index(y, x)]; }
  const T& operator()(int y, int x) const { return data_[index(y, x)]; }

  bool contains(int y, int x) const noexcept {
    return y >= 0 && x >= 0 && y < rows_ && x < cols_;
  }

  std::span<T> pixels() noexcept { return data_; }
  std::span<const T> pixels() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool same_shape(const Raster& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Raster& a, const Raster& b) = default;

 private:
  static int check_dim(int d) {
    if (d < 0) throw Error(ErrorCode::kShape, "negative raster dimension");
    return d;
  }
  std::size_t index(int y, int x) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(cols_) +
           static_cast<std::size_t>(x);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

/// Intensities in [0, 1].
using GrayImage = Raster<double>;
/// Binary mask, values in {0, 1}.
using InstanceMask = Raster<std::uint8_t>;

enum class CellClass : std::uint8_t { kVegetative = 0, kSpore = 1 };

const char* to_string(CellClass c);
CellClass cell_class_from_string(const std::string& name);

/// Ordered per-cell masks sharing one frame, with a class label per mask.
struct MaskStack {
  std::vector<InstanceMask> masks;
  std::vector<CellClass> class_labels;

  std::size_t size() const noexcept { return masks.size(); }
  void push_back(InstanceMask m, CellClass c) {
    masks.push_back(std::move(m));
    class_labels.push_back(c);
  }
};

}  // namespace detcid
