#pragma once

#include <array>

#include "detcid/raster.hpp"

namespace detcid {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Axis-aligned box in pixel coordinates. Pixel (x, y) covers
/// [x - 0.5, x + 0.5] x [y - 0.5, y + 0.5].
struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double width = 0.0;
  double height = 0.0;

  double left() const { return cx - 0.5 * width; }
  double right() const { return cx + 0.5 * width; }
  double top() const { return cy - 0.5 * height; }
  double bottom() const { return cy + 0.5 * height; }
  double area() const { return width * height; }

  static BoundingBox from_edges(double left, double top, double right, double bottom) {
    return {0.5 * (left + right), 0.5 * (top + bottom), right - left, bottom - top};
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Intersect a box with the [-0.5, cols-0.5] x [-0.5, rows-0.5] frame.
/// Returns a box with non-positive size when there is no overlap.
BoundingBox clip_to_frame(const BoundingBox& box, int rows, int cols);

/// Integer pixel range [x0, x1) x [y0, y1) whose centres lie inside the box,
/// clipped to the frame.
struct PixelRange {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  int count() const { return empty() ? 0 : (x1 - x0) * (y1 - y0); }
};
PixelRange pixel_range(const BoundingBox& box, int rows, int cols);

/// 3x3 homogeneous transform mapping source (x, y) to destination.
class AffineTransform {
 public:
  AffineTransform();  // identity
  /// Row-major 2x3 upper block; the last row is fixed to (0, 0, 1).
  AffineTransform(double a, double b, double c, double d, double e, double f);

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(double dx, double dy);
  static AffineTransform scaling(double sx, double sy);
  static AffineTransform shear_x(double sigma);
  /// Rotation by `degrees` about `center` using x' = cos x - sin y, y' = sin x + cos y.
  static AffineTransform rotation(double degrees, Point center = {});

  Point apply(Point p) const;
  double determinant() const;
  bool invertible() const;
  AffineTransform inverse() const;

  /// (*this) * other: apply `other` first.
  AffineTransform operator*(const AffineTransform& other) const;

  const std::array<double, 9>& matrix() const { return m_; }

 private:
  std::array<double, 9> m_;
};

}  // namespace detcid
