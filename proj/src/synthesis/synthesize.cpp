#include <algorithm>
#include <cmath>
#include <string>

#include "detcid/core.hpp"
#include "detcid/error.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::synthesis {

void AnnotatedImage::validate() const {
  if (image.rows() < 1 || image.cols() < 1) throw Error(ErrorCode::kShape, id + ": empty image");
  if (masks.size() == 0) throw Error(ErrorCode::kEmptyMask, id + ": no annotated cells");
  if (masks.class_labels.size() != masks.masks.size()) {
    throw Error(ErrorCode::kShape, id + ": class label count differs from mask count");
  }
  for (const auto& m : masks.masks) {
    if (!m.same_shape(InstanceMask(image.rows(), image.cols()))) {
      throw Error(ErrorCode::kShape, id + ": mask shape differs from image");
    }
    if (core::is_empty(m)) throw Error(ErrorCode::kEmptyMask, id + ": empty cell mask");
  }
}

void SynthesisConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
  if (rows < 1 || cols < 1) fail("synthesis: output size must be positive");
  for (const IntRange* r : {&isolated, &touching, &crossing}) {
    if (r->lo < 0 || r->hi < r->lo) fail("synthesis: count ranges need 0 <= lo <= hi");
  }
  if (max_vertical_shift < 0 || max_horizontal_shift < 0 || max_orientation_change < 0 ||
      shear_scale < 0) {
    fail("synthesis: shift, orientation and perturbation maxima must be >= 0");
  }
  if (shear_scale >= 1.0) fail("synthesis: shear_scale must be < 1 (scale factors 1 +/- e)");
  if (!(quilt_overlap >= 0 && quilt_overlap < quilt_block && quilt_block <= quilt_window)) {
    fail("synthesis: need 0 <= quilt_overlap < quilt_block <= quilt_window");
  }
  if (quilt_tolerance < 0) fail("synthesis: quilt_tolerance must be >= 0");
  if (placement_retries < 1) fail("synthesis: placement_retries must be >= 1");
}

const char* to_string(PlacementKind kind) {
  switch (kind) {
    case PlacementKind::kIsolated: return "isolated";
    case PlacementKind::kTouchingFirst: return "touching_first";
    case PlacementKind::kTouchingSecond: return "touching_second";
    case PlacementKind::kCrossingFirst: return "crossing_first";
    case PlacementKind::kCrossingSecond: return "crossing_second";
  }
  return "unknown";
}

int Provenance::skipped() const {
  return static_cast<int>(std::count_if(placements.begin(), placements.end(),
                                        [](const Placement& p) { return p.skipped; }));
}

namespace {

double wrap_degrees(double deg) {
  deg = std::fmod(deg, 180.0);
  if (deg < 0) deg += 180.0;
  return deg;
}

/// Wrap to (-90, 90].
double signed_angle(double deg) {
  deg = wrap_degrees(deg);
  return deg > 90.0 ? deg - 180.0 : deg;
}

/// Shift `lo..hi` (extent of the mapped cell along one axis, already offset by
/// `d`) so that it lies in [0, n-1]; centres the cell if it cannot fit.
double pull_inside(double lo, double hi, double d, int n) {
  const double max_pos = n - 1;
  if (hi - lo > max_pos) return d + (0.5 * max_pos - 0.5 * (lo + hi + 2 * d));
  if (lo + d < 0) return -lo;
  if (hi + d > max_pos) return max_pos - hi;
  return d;
}

}  // namespace

PlacedCell add_cell(const AnnotatedImage& src, int cell_index, const GrayImage& canvas,
                    double theta, double x, double y, const SynthesisConfig& cfg, Rng& rng) {
  if (cell_index < 0 || cell_index >= static_cast<int>(src.masks.size())) {
    throw Error(ErrorCode::kInvalidConfig, "add_cell: cell index out of range");
  }
  if (canvas.rows() != cfg.rows || canvas.cols() != cfg.cols) {
    throw Error(ErrorCode::kShape, "add_cell: canvas size differs from the configured size");
  }
  const InstanceMask& cell_mask = src.masks.masks[cell_index];
  const Point src_center = core::centroid(cell_mask);
  const Point out_center{0.5 * (cfg.cols - 1), 0.5 * (cfg.rows - 1)};
  // Integer recentring keeps nearest-neighbour resampling lossless.
  const auto recenter = AffineTransform::translation(std::round(out_center.x - src_center.x),
                                                     std::round(out_center.y - src_center.y));

  for (int attempt = 1; attempt <= 2; ++attempt) {
    PlacedCell placed;
    placed.attempts = attempt;
    placed.shear = cfg.shear_base + cfg.shear_scale * rng.uniform();
    placed.scale_x = 1.0 - cfg.shear_scale + 2.0 * cfg.shear_scale * rng.uniform();
    placed.scale_y = 1.0 - cfg.shear_scale + 2.0 * cfg.shear_scale * rng.uniform();

    const auto perturb = AffineTransform::translation(out_center.x, out_center.y) *
                         AffineTransform::shear_x(placed.shear) *
                         AffineTransform::scaling(placed.scale_x, placed.scale_y) *
                         AffineTransform::translation(-out_center.x, -out_center.y);
    const AffineTransform warp = perturb * recenter;
    if (!warp.invertible()) continue;
    const InstanceMask warped = core::warp_affine(cell_mask, warp, cfg.rows, cfg.cols);
    const long long warped_area = core::area(warped);
    if (warped_area == 0) continue;

    const double phi = warped_area >= 2 ? core::major_axis_angle(warped) : 0.0;
    const Point c1 = core::centroid(warped);

    struct Candidate {
      AffineTransform full;
      Point target;
      InstanceMask mask;
      double error = 0.0;
    };
    auto build = [&](double turn) {
      const AffineTransform oriented = AffineTransform::rotation(turn, c1) * warp;
      double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
      for (int yy = 0; yy < cell_mask.rows(); ++yy) {
        for (int xx = 0; xx < cell_mask.cols(); ++xx) {
          if (!cell_mask(yy, xx)) continue;
          const Point p = oriented.apply({static_cast<double>(xx), static_cast<double>(yy)});
          min_x = std::min(min_x, p.x);
          max_x = std::max(max_x, p.x);
          min_y = std::min(min_y, p.y);
          max_y = std::max(max_y, p.y);
        }
      }
      const double dx = pull_inside(min_x, max_x, x - c1.x, cfg.cols);
      const double dy = pull_inside(min_y, max_y, y - c1.y, cfg.rows);
      Candidate c;
      c.target = {c1.x + dx, c1.y + dy};
      c.full = AffineTransform::translation(dx, dy) * oriented;
      c.mask = core::warp_affine(cell_mask, c.full, cfg.rows, cfg.cols);
      if (core::area(c.mask) >= 2) c.error = signed_angle(theta - core::major_axis_angle(c.mask));
      return c;
    };
    Candidate best = build(theta - phi);
    // Resampling on the pixel grid biases the measured axis; one corrective turn.
    if (!core::is_empty(best.mask) && std::abs(best.error) > 0.5) {
      Candidate retry = build(theta - phi + best.error);
      if (!core::is_empty(retry.mask) && std::abs(retry.error) < std::abs(best.error)) {
        best = std::move(retry);
      }
    }
    if (core::is_empty(best.mask)) continue;
    placed.target = best.target;
    placed.mask = std::move(best.mask);
    const AffineTransform& full = best.full;
    const GrayImage appearance = core::warp_affine(src.image, full, cfg.rows, cfg.cols);
    placed.image = canvas;
    for (std::size_t i = 0; i < placed.image.size(); ++i) {
      if (placed.mask.storage()[i]) {
        placed.image.storage()[i] = std::clamp(appearance.storage()[i], 0.0, 1.0);
      }
    }
    return placed;
  }
  throw Error(ErrorCode::kPlacementFailed, "add_cell: transformed cell mask is empty");
}

namespace {

struct Placer {
  const AnnotatedImage& src;
  const SynthesisConfig& cfg;
  Rng& rng;
  SyntheticSample& sample;

  std::vector<int> vegetative;

  int pick_cell(bool vegetative_only) {
    if (vegetative_only && !vegetative.empty()) {
      return vegetative[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(vegetative.size()) - 1))];
    }
    return static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(src.masks.size()) - 1));
  }

  Point random_position(int cell) {
    const BoundingBox box = core::tight_bbox(src.masks.masks[cell]);
    auto draw = [&](double extent, int n) {
      const double lo = 0.5 * extent;
      const double hi = n - 0.5 * extent;
      return hi > lo ? rng.uniform(lo, hi) : 0.5 * (n - 1);
    };
    const double x = draw(box.width, cfg.cols);
    const double y = draw(box.height, cfg.rows);
    return {x, y};
  }

  /// Returns the index of the new truth mask, or -1 when skipped.
  int place(Placement& p) {
    p.cell_class = src.masks.class_labels[p.source_cell];
    for (int attempt = 1; attempt <= cfg.placement_retries; ++attempt) {
      p.attempts = attempt;
      try {
        PlacedCell placed = add_cell(src, p.source_cell, sample.image, p.theta, p.requested.x,
                                     p.requested.y, cfg, rng);
        sample.image = std::move(placed.image);
        p.placed = placed.target;
        p.shear = placed.shear;
        p.scale_x = placed.scale_x;
        p.scale_y = placed.scale_y;
        p.mask_index = static_cast<int>(sample.truth.size());
        sample.truth.push_back(std::move(placed.mask), p.cell_class);
        sample.provenance.placements.push_back(p);
        return p.mask_index;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kPlacementFailed) throw;
      }
    }
    p.skipped = true;
    sample.provenance.placements.push_back(p);
    return -1;
  }

  void skip(Placement p) {
    p.skipped = true;
    p.cell_class = src.masks.class_labels[p.source_cell];
    sample.provenance.placements.push_back(p);
  }

  void isolated() {
    Placement p;
    p.kind = PlacementKind::kIsolated;
    p.source_cell = pick_cell(false);
    p.theta = rng.uniform(0.0, 180.0);
    p.requested = random_position(p.source_cell);
    place(p);
  }

  void pair(int pair_index, bool crossing) {
    Placement first;
    first.kind = crossing ? PlacementKind::kCrossingFirst : PlacementKind::kTouchingFirst;
    first.pair = pair_index;
    first.source_cell = pick_cell(true);
    first.theta = rng.uniform(0.0, 180.0);
    first.requested = random_position(first.source_cell);

    Placement second;
    second.kind = crossing ? PlacementKind::kCrossingSecond : PlacementKind::kTouchingSecond;
    second.pair = pair_index;
    second.source_cell = pick_cell(crossing);

    const int first_mask = place(first);
    if (first_mask < 0) {
      skip(second);
      return;
    }
    const InstanceMask& m1 = sample.truth.masks[static_cast<std::size_t>(first_mask)];
    const Point c1 = core::centroid(m1);
    const BoundingBox b1 = core::tight_bbox(m1);
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double eps = rng.uniform();
    if (!crossing) {
      const double omega = b1.width;
      const double dx = side * rng.uniform(0.5 * omega, omega);
      const double dy = rng.uniform(-cfg.max_vertical_shift * eps, cfg.max_vertical_shift * eps);
      second.theta = first.theta;
      second.partner_offset = {dx, dy};
      second.partner_extent = omega;
    } else {
      const double eta = b1.height;
      const double dy = side * rng.uniform(0.5 * eta, eta);
      const double dx =
          rng.uniform(-cfg.max_horizontal_shift * eps, cfg.max_horizontal_shift * eps);
      const double turn_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      second.theta = wrap_degrees(first.theta + 90.0 +
                                  turn_sign * cfg.max_orientation_change * rng.uniform());
      second.partner_offset = {dx, dy};
      second.partner_extent = eta;
    }
    second.requested = {c1.x + second.partner_offset.x, c1.y + second.partner_offset.y};
    place(second);
  }
};

}  // namespace

SyntheticSample synthesize_image(const std::vector<AnnotatedImage>& pool,
                                 const SynthesisConfig& cfg, Rng& rng) {
  cfg.validate();
  if (pool.empty()) throw Error(ErrorCode::kInvalidConfig, "synthesis: empty source pool");

  SyntheticSample sample;
  auto& prov = sample.provenance;
  prov.source_image = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1));
  const AnnotatedImage& src = pool[static_cast<std::size_t>(prov.source_image)];
  src.validate();
  prov.source_id = src.id;

  const GrayImage background = inpaint_background(src);
  const int w = cfg.quilt_window;
  if (w > background.rows() || w > background.cols()) {
    throw Error(ErrorCode::kInvalidConfig,
                "synthesis: quilt window larger than source image " + src.id);
  }
  prov.patch_y = static_cast<int>(rng.uniform_int(0, background.rows() - w));
  prov.patch_x = static_cast<int>(rng.uniform_int(0, background.cols() - w));
  GrayImage patch(w, w);
  for (int y = 0; y < w; ++y) {
    for (int x = 0; x < w; ++x) patch(y, x) = background(prov.patch_y + y, prov.patch_x + x);
  }
  sample.image = quilt_texture(patch, cfg.rows, cfg.cols, cfg.quilt_block, cfg.quilt_overlap,
                               rng, cfg.quilt_tolerance);

  prov.isolated = static_cast<int>(rng.uniform_int(cfg.isolated.lo, cfg.isolated.hi));
  prov.touching = static_cast<int>(rng.uniform_int(cfg.touching.lo, cfg.touching.hi));
  prov.crossing = static_cast<int>(rng.uniform_int(cfg.crossing.lo, cfg.crossing.hi));

  Placer placer{src, cfg, rng, sample, {}};
  for (std::size_t i = 0; i < src.masks.size(); ++i) {
    if (src.masks.class_labels[i] == CellClass::kVegetative) {
      placer.vegetative.push_back(static_cast<int>(i));
    }
  }
  for (int p = 0; p < prov.isolated; ++p) placer.isolated();
  for (int q = 0; q < prov.touching; ++q) placer.pair(q, false);
  for (int r = 0; r < prov.crossing; ++r) placer.pair(r, true);
  return sample;
}

std::uint64_t image_seed(std::uint64_t seed, std::uint64_t index) { return mix_seed(seed, index); }

SyntheticSample synthesize_indexed(const std::vector<AnnotatedImage>& pool,
                                   const SynthesisConfig& cfg, std::uint64_t index) {
  const std::uint64_t seed = image_seed(cfg.seed, index);
  Rng rng(seed);
  SyntheticSample s = synthesize_image(pool, cfg, rng);
  s.provenance.seed = seed;
  return s;
}

}  // namespace detcid::synthesis
