#include <algorithm>
#include <cmath>
#include <tuple>

#include "detcid/detection.hpp"

namespace detcid::detection {

const char* to_string(AnchorType t) {
  switch (t) {
    case AnchorType::kHorizontal: return "horizontal";
    case AnchorType::kVertical: return "vertical";
    case AnchorType::kSquare: return "square";
  }
  return "?";
}

AnchorType anchor_type_from_string(const std::string& name) {
  if (name == "horizontal") return AnchorType::kHorizontal;
  if (name == "vertical") return AnchorType::kVertical;
  if (name == "square") return AnchorType::kSquare;
  throw Error(ErrorCode::kParse, "unknown anchor type '" + name + "'");
}

double AnchorSpec::width() const {
  switch (type) {
    case AnchorType::kHorizontal: return std::sqrt(2.0 * area);
    case AnchorType::kVertical: return std::sqrt(0.5 * area);
    case AnchorType::kSquare: break;
  }
  return std::sqrt(area);
}

double AnchorSpec::height() const {
  switch (type) {
    case AnchorType::kHorizontal: return std::sqrt(0.5 * area);
    case AnchorType::kVertical: return std::sqrt(2.0 * area);
    case AnchorType::kSquare: break;
  }
  return std::sqrt(area);
}

std::vector<AnchorSpec> make_anchors(const std::vector<double>& areas) {
  std::vector<AnchorSpec> out;
  for (double a : areas) {
    if (!(a > 0.0)) throw Error(ErrorCode::kInvalidConfig, "anchor areas must be positive");
    for (AnchorType t : {AnchorType::kHorizontal, AnchorType::kVertical, AnchorType::kSquare}) {
      out.push_back({t, a});
    }
  }
  return out;
}

namespace {

/// Summed-area table of body + wall probability.
class Integral {
 public:
  explicit Integral(const arpn::LabelMap& map) : rows_(map.h), cols_(map.w) {
    if (map.c != 3) throw Error(ErrorCode::kShape, "label map must have 3 channels");
    s_.assign(static_cast<std::size_t>(rows_ + 1) * (cols_ + 1), 0.0);
    for (int y = 0; y < rows_; ++y) {
      double row = 0.0;
      for (int x = 0; x < cols_; ++x) {
        row += map.at(arpn::kBody, y, x) + map.at(arpn::kWall, y, x);
        at(y + 1, x + 1) = at(y, x + 1) + row;
      }
    }
  }

  double sum(const PixelRange& r) const {
    if (r.empty()) return 0.0;
    return at(r.y1, r.x1) - at(r.y0, r.x1) - at(r.y1, r.x0) + at(r.y0, r.x0);
  }

  /// Mean over the pixels whose centres fall in the frame-clipped box; -1 if none.
  double mean(const BoundingBox& box) const {
    const PixelRange r = pixel_range(box, rows_, cols_);
    if (r.empty()) return -1.0;
    return sum(r) / r.count();
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

 private:
  double& at(int y, int x) { return s_[static_cast<std::size_t>(y) * (cols_ + 1) + x]; }
  double at(int y, int x) const { return s_[static_cast<std::size_t>(y) * (cols_ + 1) + x]; }

  int rows_, cols_;
  std::vector<double> s_;
};

bool proposal_before(const Proposal& a, const Proposal& b) {
  const auto key = [](const Proposal& p) {
    return std::make_tuple(-p.score, -p.context, -p.anchor.area, static_cast<int>(p.anchor.type),
                           p.box.cy, p.box.cx);
  };
  return key(a) < key(b);
}

}  // namespace

std::vector<Proposal> propose_anchors(const arpn::LabelMap& map,
                                      const std::vector<AnchorSpec>& anchors, double tau,
                                      int stride) {
  if (stride < 1) throw Error(ErrorCode::kInvalidConfig, "anchor stride must be >= 1");
  const Integral integral(map);
  const int ny = (map.h + stride - 1) / stride;
  const int nx = (map.w + stride - 1) / stride;
  std::vector<Proposal> out;
  for (const AnchorSpec& a : anchors) {
    for (int i = 0; i < ny; ++i) {
      const double cy = (i + 0.5) * stride - 0.5;
      for (int j = 0; j < nx; ++j) {
        const double cx = (j + 0.5) * stride - 0.5;
        const BoundingBox window{cx, cy, a.width(), a.height()};
        const double score = integral.mean(window);
        if (!(score > tau)) continue;
        const double context =
            integral.mean({cx, cy, 1.5 * a.width(), 1.5 * a.height()});
        out.push_back({clip_to_frame(window, map.h, map.w), a, score, context});
      }
    }
  }
  std::sort(out.begin(), out.end(), proposal_before);
  return out;
}

std::vector<Proposal> jitter_proposals(const std::vector<Proposal>& props,
                                       const arpn::LabelMap& map, double min_fraction) {
  static constexpr double kScales[3] = {0.95, 1.0, 1.05};
  std::vector<Proposal> out;
  if (props.empty()) return out;
  const Integral integral(map);
  for (const Proposal& p : props) {
    for (double sh : kScales) {
      for (double sw : kScales) {
        Proposal v = p;
        v.box = clip_to_frame({p.box.cx, p.box.cy, p.box.width * sw, p.box.height * sh},
                              map.h, map.w);
        if (!(v.box.width > 0.0 && v.box.height > 0.0)) continue;
        if (integral.mean(v.box) < min_fraction) continue;
        out.push_back(v);
      }
    }
  }
  return out;
}

double derive_tau_anchor(double smallest_cell_area, double smallest_anchor_area) {
  if (!(smallest_anchor_area > 0.0)) throw Error(ErrorCode::kInvalidConfig, "anchor area must be positive");
  return std::clamp(0.5 * smallest_cell_area / smallest_anchor_area, 0.05, 0.5);
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

std::array<double, 4> encode_box(const BoundingBox& ref, const BoundingBox& target) {
  if (!(ref.width > 0 && ref.height > 0 && target.width > 0 && target.height > 0)) {
    throw Error(ErrorCode::kInvalidBox, "cannot encode a degenerate box");
  }
  return {(target.cx - ref.cx) / ref.width, (target.cy - ref.cy) / ref.height,
          std::log(target.width / ref.width), std::log(target.height / ref.height)};
}

BoundingBox decode_box(const BoundingBox& ref, const std::array<double, 4>& r) {
  const double kMaxLog = std::log(1000.0 / 16.0);
  return {ref.cx + r[0] * ref.width, ref.cy + r[1] * ref.height,
          ref.width * std::exp(std::min(r[2], kMaxLog)),
          ref.height * std::exp(std::min(r[3], kMaxLog))};
}

}  // namespace detcid::detection
