#include <algorithm>
#include <cmath>

#include "detcid/arpn.hpp"
#include "detcid/core.hpp"

namespace detcid::arpn {

void validate_label_map(const LabelMap& map, double tol) {
  if (map.c != 3) throw Error(ErrorCode::kShape, "label map must have 3 channels");
  const std::size_t plane = static_cast<std::size_t>(map.h) * map.w;
  for (std::size_t i = 0; i < plane; ++i) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double p = map.data[c * plane + i];
      if (!(p >= -tol && p <= 1.0 + tol)) throw Error(ErrorCode::kShape, "label map value outside [0,1]");
      s += p;
    }
    if (std::abs(s - 1.0) > tol) throw Error(ErrorCode::kShape, "label map pixel does not sum to 1");
  }
}

void validate_one_hot(const LabelMap& gt) {
  if (gt.c != 3) throw Error(ErrorCode::kInvalidGroundTruth, "ground truth must have 3 channels");
  const std::size_t plane = static_cast<std::size_t>(gt.h) * gt.w;
  for (std::size_t i = 0; i < plane; ++i) {
    int ones = 0;
    for (int c = 0; c < 3; ++c) {
      const double v = gt.data[c * plane + i];
      if (v == 1.0) {
        ++ones;
      } else if (v != 0.0) {
        throw Error(ErrorCode::kInvalidGroundTruth, "ground truth is not one-hot");
      }
    }
    if (ones != 1) throw Error(ErrorCode::kInvalidGroundTruth, "ground truth is not one-hot");
  }
}

LabelMap ground_truth_map(const MaskStack& masks, int rows, int cols, int wall_width) {
  if (wall_width < 1) throw Error(ErrorCode::kInvalidConfig, "wall width must be positive");
  const int out_r = wall_width / 2;
  const int in_r = wall_width - out_r;
  Raster<std::uint8_t> label(rows, cols, kBackground);
  for (const auto& m : masks.masks) {
    if (m.rows() != rows || m.cols() != cols) throw Error(ErrorCode::kShape, "mask frame mismatch");
    for (int y = 0; y < rows; ++y) {
      for (int x = 0; x < cols; ++x) {
        if (m(y, x) && label(y, x) == kBackground) label(y, x) = kBody;
      }
    }
  }
  for (const auto& m : masks.masks) {
    const InstanceMask outer = core::dilate(m, out_r);
    const InstanceMask inner = core::erode(m, in_r);
    for (int y = 0; y < rows; ++y) {
      for (int x = 0; x < cols; ++x) {
        if (outer(y, x) && !inner(y, x)) label(y, x) = kWall;
      }
    }
  }
  LabelMap gt(3, rows, cols);
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) gt.at(label(y, x), y, x) = 1.0;
  }
  return gt;
}

GrayImage foreground_probability(const LabelMap& map) {
  GrayImage out(map.h, map.w);
  for (int y = 0; y < map.h; ++y) {
    for (int x = 0; x < map.w; ++x) out(y, x) = map.at(kBody, y, x) + map.at(kWall, y, x);
  }
  return out;
}

ClassWeights inverse_frequency_weights(const std::vector<LabelMap>& maps) {
  std::array<double, 3> count{0.0, 0.0, 0.0};
  for (const auto& m : maps) {
    const std::size_t plane = static_cast<std::size_t>(m.h) * m.w;
    for (int c = 0; c < 3; ++c) {
      for (std::size_t i = 0; i < plane; ++i) count[c] += m.data[c * plane + i];
    }
  }
  ClassWeights w{};
  double mean = 0.0;
  for (int c = 0; c < 3; ++c) {
    w[c] = 1.0 / std::max(count[c], 1.0);
    mean += w[c] / 3.0;
  }
  for (double& v : w) v /= mean;
  return w;
}

nn::Tensor image_tensor(const GrayImage& img) {
  nn::Tensor t(1, img.rows(), img.cols());
  std::copy(img.storage().begin(), img.storage().end(), t.data.begin());
  return t;
}

}  // namespace detcid::arpn
