#include "detcid/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "detcid/error.hpp"

namespace detcid {

BoundingBox clip_to_frame(const BoundingBox& box, int rows, int cols) {
  const double l = std::max(box.left(), -0.5);
  const double t = std::max(box.top(), -0.5);
  const double r = std::min(box.right(), cols - 0.5);
  const double b = std::min(box.bottom(), rows - 0.5);
  return BoundingBox::from_edges(l, t, r, b);
}

PixelRange pixel_range(const BoundingBox& box, int rows, int cols) {
  constexpr double kEps = 1e-9;
  PixelRange r;
  r.x0 = std::max(0, static_cast<int>(std::ceil(box.left() - kEps)));
  r.y0 = std::max(0, static_cast<int>(std::ceil(box.top() - kEps)));
  r.x1 = std::min(cols, static_cast<int>(std::ceil(box.right() - kEps)));
  r.y1 = std::min(rows, static_cast<int>(std::ceil(box.bottom() - kEps)));
  return r;
}

AffineTransform::AffineTransform() : m_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

AffineTransform::AffineTransform(double a, double b, double c, double d, double e, double f)
    : m_{a, b, c, d, e, f, 0, 0, 1} {}

AffineTransform AffineTransform::translation(double dx, double dy) {
  return {1, 0, dx, 0, 1, dy};
}

AffineTransform AffineTransform::scaling(double sx, double sy) { return {sx, 0, 0, 0, sy, 0}; }

AffineTransform AffineTransform::shear_x(double sigma) { return {1, sigma, 0, 0, 1, 0}; }

AffineTransform AffineTransform::rotation(double degrees, Point center) {
  const double rad = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(rad);
  const double s = std::sin(rad);
  return translation(center.x, center.y) * AffineTransform(c, -s, 0, s, c, 0) *
         translation(-center.x, -center.y);
}

Point AffineTransform::apply(Point p) const {
  return {m_[0] * p.x + m_[1] * p.y + m_[2], m_[3] * p.x + m_[4] * p.y + m_[5]};
}

double AffineTransform::determinant() const { return m_[0] * m_[4] - m_[1] * m_[3]; }

bool AffineTransform::invertible() const { return std::abs(determinant()) > 1e-9; }

AffineTransform AffineTransform::inverse() const {
  if (!invertible()) throw Error(ErrorCode::kInvalidTransform, "transform is not invertible");
  const double det = determinant();
  const double a = m_[4] / det;
  const double b = -m_[1] / det;
  const double d = -m_[3] / det;
  const double e = m_[0] / det;
  const double c = -(a * m_[2] + b * m_[5]);
  const double f = -(d * m_[2] + e * m_[5]);
  return {a, b, c, d, e, f};
}

AffineTransform AffineTransform::operator*(const AffineTransform& o) const {
  const auto& a = m_;
  const auto& b = o.m_;
  return {a[0] * b[0] + a[1] * b[3],        a[0] * b[1] + a[1] * b[4],
          a[0] * b[2] + a[1] * b[5] + a[2], a[3] * b[0] + a[4] * b[3],
          a[3] * b[1] + a[4] * b[4],        a[3] * b[2] + a[4] * b[5] + a[5]};
}

}  // namespace detcid
