#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "detcid/error.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::synthesis {

namespace {

struct Cell {
  Point a, b;  // capsule axis end points (equal for spores)
  double radius = 0.0;
  CellClass cls = CellClass::kVegetative;
};

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x;
  const double vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = 0.0;
  if (len2 > 0) t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / len2, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

GrayImage toy_background(int rows, int cols, Rng& rng) {
  GrayImage bg(rows, cols);
  const double base = rng.uniform(0.25, 0.4);
  const double gx = rng.uniform(-1.0, 1.0);
  const double gy = rng.uniform(-1.0, 1.0);
  const double amp = rng.uniform(0.08, 0.18);
  struct Wave { double fx, fy, phase, amp; };
  Wave waves[4];
  for (auto& w : waves) {
    w = {rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15),
         rng.uniform(0.0, 2 * std::numbers::pi), rng.uniform(0.01, 0.04)};
  }
  const double norm = std::max(rows, cols);
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      double v = base + amp * (gx * x + gy * y) / norm;
      for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      v += 0.03 * rng.normal();
      bg(y, x) = v;
    }
  }
  return bg;
}

}  // namespace

std::vector<AnnotatedImage> make_toy_pool(const ToyPoolConfig& cfg) {
  if (cfg.count < 1 || cfg.rows < 16 || cfg.cols < 16) {
    throw Error(ErrorCode::kInvalidConfig, "toy pool: need count >= 1 and size >= 16");
  }
  Rng rng(cfg.seed);
  std::vector<AnnotatedImage> pool;
  for (int k = 0; k < cfg.count; ++k) {
    AnnotatedImage img;
    img.id = "toy_" + std::to_string(k);
    img.image = toy_background(cfg.rows, cfg.cols, rng);

    std::vector<Cell> cells;
    const int n_veg = static_cast<int>(rng.uniform_int(cfg.vegetative.lo, cfg.vegetative.hi));
    const int n_spore = static_cast<int>(rng.uniform_int(cfg.spores.lo, cfg.spores.hi));
    for (int i = 0; i < n_veg + n_spore; ++i) {
      const bool spore = i >= n_veg;
      for (int tries = 0; tries < 200; ++tries) {
        Cell c;
        c.cls = spore ? CellClass::kSpore : CellClass::kVegetative;
        double half_len = 0.0;
        if (spore) {
          c.radius = 0.5 * rng.uniform(cfg.spore_diameter_min, cfg.spore_diameter_max);
        } else {
          c.radius = 0.5 * rng.uniform(cfg.rod_width_min, cfg.rod_width_max);
          half_len = 0.5 * rng.uniform(cfg.rod_length_min, cfg.rod_length_max) - c.radius;
        }
        const double ang = rng.uniform(0.0, std::numbers::pi);
        const double reach = half_len + c.radius + 2.0;
        const Point center{rng.uniform(reach, cfg.cols - 1 - reach),
                           rng.uniform(reach, cfg.rows - 1 - reach)};
        c.a = {center.x - half_len * std::cos(ang), center.y - half_len * std::sin(ang)};
        c.b = {center.x + half_len * std::cos(ang), center.y + half_len * std::sin(ang)};
        bool clear = true;
        for (const auto& o : cells) {
          const double gap = std::min({segment_distance(c.a, o.a, o.b),
                                       segment_distance(c.b, o.a, o.b),
                                       segment_distance(o.a, c.a, c.b),
                                       segment_distance(o.b, c.a, c.b)});
          if (gap < c.radius + o.radius + 4.0) clear = false;
        }
        if (clear) {
          cells.push_back(c);
          break;
        }
      }
    }
    if (cells.empty()) throw Error(ErrorCode::kInvalidConfig, "toy pool: no room for cells");

    for (const auto& c : cells) {
      InstanceMask m(cfg.rows, cfg.cols, 0);
      const double body = rng.uniform(0.68, 0.82);
      for (int y = 0; y < cfg.rows; ++y) {
        for (int x = 0; x < cfg.cols; ++x) {
          const double d = segment_distance({double(x), double(y)}, c.a, c.b);
          if (d > c.radius + 0.5) continue;
          m(y, x) = 1;
          // Bright rim towards the wall, slight shading across the body.
          const double rim = std::clamp((d - (c.radius - 1.5)) / 1.5, 0.0, 1.0);
          const double shade = 0.05 * (d / (c.radius + 0.5));
          img.image(y, x) = body + 0.12 * rim - shade + 0.02 * rng.normal();
        }
      }
      img.masks.push_back(std::move(m), c.cls);
    }
    for (double& v : img.image.pixels()) v = std::clamp(v, 0.0, 1.0);
    pool.push_back(std::move(img));
  }
  return pool;
}

SynthesisConfig toy_synthesis_config() {
  SynthesisConfig cfg;
  cfg.rows = 64;
  cfg.cols = 64;
  cfg.isolated = {1, 3};
  cfg.touching = {0, 0};
  cfg.crossing = {0, 0};
  cfg.quilt_window = 32;
  cfg.quilt_block = 16;
  cfg.quilt_overlap = 4;
  return cfg;
}

}  // namespace detcid::synthesis
