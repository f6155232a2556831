#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "detcid/detection.hpp"

namespace detcid::detection {

namespace {

/// A pasted mask restricted to the pixel range of its mask box.
struct Sparse {
  PixelRange range;
  std::vector<std::uint8_t> bits;
  long long area = 0;

  std::uint8_t at(int y, int x) const {
    return bits[static_cast<std::size_t>(y - range.y0) * (range.x1 - range.x0) + (x - range.x0)];
  }
};

Sparse paste_sparse(const Detection& d, int rows, int cols) {
  Sparse s;
  const int g = d.mask.rows();
  if (g < 1 || d.mask.cols() != g) throw Error(ErrorCode::kShape, "detection mask grid must be square");
  if (!(d.mask_box.width > 0.0 && d.mask_box.height > 0.0)) return s;
  s.range = pixel_range(d.mask_box, rows, cols);
  if (s.range.empty()) return s;
  const int w = s.range.x1 - s.range.x0;
  s.bits.assign(static_cast<std::size_t>(s.range.count()), 0);
  for (int y = s.range.y0; y < s.range.y1; ++y) {
    const int i = std::clamp(static_cast<int>(std::floor((y - d.mask_box.top()) / d.mask_box.height * g)), 0, g - 1);
    for (int x = s.range.x0; x < s.range.x1; ++x) {
      const int j = std::clamp(static_cast<int>(std::floor((x - d.mask_box.left()) / d.mask_box.width * g)), 0, g - 1);
      const std::uint8_t v = d.mask(i, j) ? 1 : 0;
      s.bits[static_cast<std::size_t>(y - s.range.y0) * w + (x - s.range.x0)] = v;
      s.area += v;
    }
  }
  return s;
}

long long sparse_intersection(const Sparse& a, const Sparse& b) {
  const int x0 = std::max(a.range.x0, b.range.x0);
  const int x1 = std::min(a.range.x1, b.range.x1);
  const int y0 = std::max(a.range.y0, b.range.y0);
  const int y1 = std::min(a.range.y1, b.range.y1);
  long long n = 0;
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) n += a.at(y, x) & b.at(y, x);
  }
  return n;
}

double sparse_modified_iou(const Sparse& a, const Sparse& b) {
  if (a.area == 0 || b.area == 0) return 0.0;
  return static_cast<double>(sparse_intersection(a, b)) / static_cast<double>(std::min(a.area, b.area));
}

}  // namespace

InstanceMask paste_mask(const Detection& d, int rows, int cols) {
  InstanceMask out(rows, cols, 0);
  const Sparse s = paste_sparse(d, rows, cols);
  for (int y = s.range.y0; y < s.range.y1; ++y) {
    for (int x = s.range.x0; x < s.range.x1; ++x) out(y, x) = s.at(y, x);
  }
  return out;
}

double modified_iou(const InstanceMask& a, const InstanceMask& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::kShape, "modified_iou: frame mismatch");
  long long na = 0, nb = 0, ni = 0;
  const auto& da = a.storage();
  const auto& db = b.storage();
  for (std::size_t i = 0; i < da.size(); ++i) {
    const bool x = da[i] != 0;
    const bool y = db[i] != 0;
    na += x;
    nb += y;
    ni += x && y;
  }
  if (na == 0 || nb == 0) return 0.0;
  return static_cast<double>(ni) / static_cast<double>(std::min(na, nb));
}

double modified_iou(const Detection& a, const Detection& b, int rows, int cols) {
  return sparse_modified_iou(paste_sparse(a, rows, cols), paste_sparse(b, rows, cols));
}

bool nms_before(const Detection& a, long long area_a, const Detection& b, long long area_b) {
  const auto key = [](const Detection& d, long long area) {
    return std::make_tuple(-d.score, -area, d.mask_box.top(), d.mask_box.left(),
                           static_cast<int>(d.cell_class), d.mask_box.width, d.mask_box.height,
                           d.box.cx, d.box.cy, d.box.width, d.box.height);
  };
  const auto ka = key(a, area_a);
  const auto kb = key(b, area_b);
  if (ka != kb) return ka < kb;
  if (a.mask.storage() != b.mask.storage()) return a.mask.storage() < b.mask.storage();
  return std::make_tuple(static_cast<int>(a.anchor.type), a.anchor.area, a.offsets) <
         std::make_tuple(static_cast<int>(b.anchor.type), b.anchor.area, b.offsets);
}

std::vector<Detection> mask_nms(const std::vector<Detection>& dets, double tau_nms, int rows, int cols) {
  if (!(tau_nms > 0.0 && tau_nms <= 1.0)) throw Error(ErrorCode::kInvalidConfig, "tau_nms must be in (0, 1]");
  std::vector<Sparse> pasted;
  pasted.reserve(dets.size());
  for (const auto& d : dets) pasted.push_back(paste_sparse(d, rows, cols));
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return nms_before(dets[i], pasted[i].area, dets[j], pasted[j].area);
  });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool keep = true;
    for (std::size_t k : kept) {
      if (dets[k].cell_class != dets[i].cell_class) continue;
      if (sparse_modified_iou(pasted[k], pasted[i]) >= tau_nms) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(i);
  }
  std::vector<Detection> out;
  out.reserve(kept.size());
  for (std::size_t k : kept) out.push_back(dets[k]);
  return out;
}

Rle rle_encode(const InstanceMask& m) {
  Rle r{m.rows(), m.cols(), {}};
  std::uint8_t current = 0;
  long long run = 0;
  for (std::uint8_t v : m.storage()) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != current) {
      r.counts.push_back(run);
      run = 0;
      current = b;
    }
    ++run;
  }
  r.counts.push_back(run);
  return r;
}

InstanceMask rle_decode(const Rle& r) {
  if (r.rows < 0 || r.cols < 0) throw Error(ErrorCode::kParse, "rle: negative size");
  InstanceMask m(r.rows, r.cols, 0);
  auto& d = m.storage();
  std::size_t pos = 0;
  std::uint8_t v = 0;
  for (long long c : r.counts) {
    if (c < 0 || pos + static_cast<std::size_t>(c) > d.size()) throw Error(ErrorCode::kParse, "rle: runs exceed mask size");
    std::fill(d.begin() + static_cast<std::ptrdiff_t>(pos), d.begin() + static_cast<std::ptrdiff_t>(pos + c), v);
    pos += static_cast<std::size_t>(c);
    v ^= 1;
  }
  if (pos != d.size()) throw Error(ErrorCode::kParse, "rle: runs do not cover the mask");
  return m;
}

Json detections_to_json(const std::vector<Detection>& dets, int rows, int cols) {
  Json out = Json::array();
  for (const auto& d : dets) {
    const Rle r = rle_encode(paste_mask(d, rows, cols));
    const BoundingBox b = clip_to_frame(d.box, rows, cols);
    out.push_back({{"score", d.score},
                   {"class", to_string(d.cell_class)},
                   {"box", {b.cx, b.cy, b.width, b.height}},
                   {"mask", {{"size", {r.rows, r.cols}}, {"counts", r.counts}}},
                   {"provenance",
                    {{"anchor", to_string(d.anchor.type)},
                     {"anchor_area", d.anchor.area},
                     {"proposal_box", {d.mask_box.cx, d.mask_box.cy, d.mask_box.width, d.mask_box.height}}}}});
  }
  return out;
}

std::vector<ScoredMask> scored_masks_from_json(const Json& j) {
  if (!j.is_array()) throw Error(ErrorCode::kParse, "detections: expected a list");
  std::vector<ScoredMask> out;
  try {
    for (const auto& e : j) {
      ScoredMask s;
      s.score = e.at("score").get<double>();
      s.cell_class = cell_class_from_string(e.at("class").get<std::string>());
      const auto& m = e.at("mask");
      Rle r;
      r.rows = m.at("size").at(0).get<int>();
      r.cols = m.at("size").at(1).get<int>();
      r.counts = m.at("counts").get<std::vector<long long>>();
      s.mask = rle_decode(r);
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("detections: ") + e.what());
  }
  return out;
}

}  // namespace detcid::detection
