#include "detcid/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "detcid/error.hpp"

namespace detcid::core {

namespace {

void require_same_shape(const InstanceMask& a, const InstanceMask& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::kShape, std::string(what) + ": masks have different shapes");
  }
}

struct Moments {
  long long n = 0;
  double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
};

Moments moments(const InstanceMask& m) {
  Moments mo;
  double sx = 0, sy = 0;
  for (int y = 0; y < m.rows(); ++y) {
    for (int x = 0; x < m.cols(); ++x) {
      if (m(y, x)) {
        ++mo.n;
        sx += x;
        sy += y;
      }
    }
  }
  if (mo.n == 0) return mo;
  mo.mx = sx / static_cast<double>(mo.n);
  mo.my = sy / static_cast<double>(mo.n);
  for (int y = 0; y < m.rows(); ++y) {
    for (int x = 0; x < m.cols(); ++x) {
      if (m(y, x)) {
        const double dx = x - mo.mx;
        const double dy = y - mo.my;
        mo.sxx += dx * dx;
        mo.syy += dy * dy;
        mo.sxy += dx * dy;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(mo.n);
  mo.sxx *= inv;
  mo.syy *= inv;
  mo.sxy *= inv;
  return mo;
}

}  // namespace

double sample_bilinear(const GrayImage& img, double x, double y) {
  const int cols = img.cols();
  const int rows = img.rows();
  if (x < -0.5 || y < -0.5 || x > cols - 0.5 || y > rows - 0.5) return 0.0;
  x = std::clamp(x, 0.0, static_cast<double>(cols - 1));
  y = std::clamp(y, 0.0, static_cast<double>(rows - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, cols - 1);
  const int y1 = std::min(y0 + 1, rows - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = img(y0, x0) * (1.0 - fx) + img(y0, x1) * fx;
  const double bottom = img(y1, x0) * (1.0 - fx) + img(y1, x1) * fx;
  return top * (1.0 - fy) + bottom * fy;
}

GrayImage warp_affine(const GrayImage& img, const AffineTransform& t, int rows, int cols) {
  const AffineTransform inv = t.inverse();
  GrayImage out(rows, cols, 0.0);
  if (img.empty()) return out;
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      const Point s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      out(y, x) = sample_bilinear(img, s.x, s.y);
    }
  }
  return out;
}

InstanceMask warp_affine(const InstanceMask& mask, const AffineTransform& t, int rows, int cols) {
  const AffineTransform inv = t.inverse();
  InstanceMask out(rows, cols, 0);
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      const Point s = inv.apply({static_cast<double>(x), static_cast<double>(y)});
      const int sx = static_cast<int>(std::floor(s.x + 0.5));
      const int sy = static_cast<int>(std::floor(s.y + 0.5));
      if (mask.contains(sy, sx)) out(y, x) = mask(sy, sx) ? 1 : 0;
    }
  }
  return out;
}

long long area(const InstanceMask& m) {
  long long n = 0;
  for (auto v : m.pixels()) n += v ? 1 : 0;
  return n;
}

bool is_empty(const InstanceMask& m) {
  return std::none_of(m.pixels().begin(), m.pixels().end(), [](auto v) { return v != 0; });
}

Point centroid(const InstanceMask& m) {
  const Moments mo = moments(m);
  if (mo.n == 0) throw Error(ErrorCode::kEmptyMask, "centroid of an empty mask");
  return {mo.mx, mo.my};
}

double major_axis_angle(const InstanceMask& m) {
  const Moments mo = moments(m);
  if (mo.n < 2) throw Error(ErrorCode::kDegenerateMask, "major axis needs at least two pixels");
  const double spread = std::hypot(mo.sxx - mo.syy, 2.0 * mo.sxy);
  if (spread < 1e-9) return 0.0;
  double deg = 0.5 * std::atan2(2.0 * mo.sxy, mo.sxx - mo.syy) * 180.0 / std::numbers::pi;
  if (deg < 0.0) deg += 180.0;
  if (deg >= 180.0) deg -= 180.0;
  return deg;
}

double elongation(const InstanceMask& m) {
  const Moments mo = moments(m);
  if (mo.n < 2) return 1.0;
  const double mean = 0.5 * (mo.sxx + mo.syy);
  const double half = 0.5 * std::hypot(mo.sxx - mo.syy, 2.0 * mo.sxy);
  const double lmax = mean + half;
  const double lmin = mean - half;
  if (lmin <= 1e-12) return std::numeric_limits<double>::infinity();
  return std::sqrt(lmax / lmin);
}

long long intersection_area(const InstanceMask& a, const InstanceMask& b) {
  require_same_shape(a, b, "intersection_area");
  long long n = 0;
  const auto pa = a.pixels();
  const auto pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) n += (pa[i] && pb[i]) ? 1 : 0;
  return n;
}

double mask_iou(const InstanceMask& a, const InstanceMask& b) {
  require_same_shape(a, b, "mask_iou");
  long long inter = 0, uni = 0;
  const auto pa = a.pixels();
  const auto pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const bool x = pa[i] != 0;
    const bool y = pb[i] != 0;
    inter += (x && y) ? 1 : 0;
    uni += (x || y) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BoundingBox tight_bbox(const InstanceMask& m) {
  int x0 = m.cols(), y0 = m.rows(), x1 = -1, y1 = -1;
  for (int y = 0; y < m.rows(); ++y) {
    for (int x = 0; x < m.cols(); ++x) {
      if (m(y, x)) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) throw Error(ErrorCode::kEmptyMask, "bounding box of an empty mask");
  return {0.5 * (x0 + x1), 0.5 * (y0 + y1), static_cast<double>(x1 - x0 + 1),
          static_cast<double>(y1 - y0 + 1)};
}

namespace {

InstanceMask morph_step(const InstanceMask& m, bool dilation) {
  InstanceMask out(m.rows(), m.cols(), 0);
  for (int y = 0; y < m.rows(); ++y) {
    for (int x = 0; x < m.cols(); ++x) {
      bool hit = !dilation;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          // Outside the frame counts as background for both operations.
          const bool v = m.contains(y + dy, x + dx) && m(y + dy, x + dx);
          if (dilation && v) hit = true;
          if (!dilation && !v) hit = false;
        }
      }
      out(y, x) = hit ? 1 : 0;
    }
  }
  return out;
}

}  // namespace

InstanceMask dilate(const InstanceMask& m, int radius) {
  InstanceMask out = m;
  for (int i = 0; i < radius; ++i) out = morph_step(out, true);
  return out;
}

InstanceMask erode(const InstanceMask& m, int radius) {
  InstanceMask out = m;
  for (int i = 0; i < radius; ++i) out = morph_step(out, false);
  return out;
}

InstanceMask mask_union(const std::vector<InstanceMask>& masks, int rows, int cols) {
  InstanceMask out(rows, cols, 0);
  for (const auto& m : masks) {
    if (m.rows() != rows || m.cols() != cols) throw Error(ErrorCode::kShape, "mask_union: shape");
    auto po = out.pixels();
    auto pm = m.pixels();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = (po[i] || pm[i]) ? 1 : 0;
  }
  return out;
}

bool in_unit_range(const GrayImage& img) {
  return std::all_of(img.pixels().begin(), img.pixels().end(),
                     [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; });
}

GrayImage quantize(const GrayImage& img) {
  GrayImage out = img;
  for (double& v : out.pixels()) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

}  // namespace detcid::core
