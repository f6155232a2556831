#include <algorithm>
#include <cmath>
#include <vector>

#include "detcid/core.hpp"
#include "detcid/error.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::synthesis {

namespace {

constexpr double kConvergence = 1e-4;
constexpr int kMaxSweeps = 50000;
constexpr int kResidualRadius = 2;
constexpr std::uint64_t kResidualSeed = 0x5eedf111ULL;

}  // namespace

GrayImage inpaint_background(const AnnotatedImage& src) {
  const int rows = src.image.rows();
  const int cols = src.image.cols();
  const InstanceMask hole = core::mask_union(src.masks.masks, rows, cols);
  const long long hole_px = core::area(hole);
  if (hole_px == static_cast<long long>(hole.size())) {
    throw Error(ErrorCode::kNoBackground, "masks cover the whole image");
  }

  GrayImage out = src.image;
  std::vector<int> holes;
  holes.reserve(static_cast<std::size_t>(hole_px));
  double known_sum = 0.0;
  long long known_n = 0;
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      if (hole(y, x)) {
        holes.push_back(y * cols + x);
      } else {
        known_sum += src.image(y, x);
        ++known_n;
      }
    }
  }
  if (holes.empty()) return out;
  const double known_mean = known_sum / static_cast<double>(known_n);
  for (int idx : holes) out.storage()[idx] = known_mean;

  // Gauss-Seidel sweeps of 4-neighbour averaging over the hole.
  auto& px = out.storage();
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double max_delta = 0.0;
    for (int idx : holes) {
      const int y = idx / cols;
      const int x = idx % cols;
      double s = 0.0;
      int n = 0;
      if (x > 0) { s += px[idx - 1]; ++n; }
      if (x + 1 < cols) { s += px[idx + 1]; ++n; }
      if (y > 0) { s += px[idx - cols]; ++n; }
      if (y + 1 < rows) { s += px[idx + cols]; ++n; }
      const double v = s / n;
      max_delta = std::max(max_delta, std::abs(v - px[idx]));
      px[idx] = v;
    }
    if (max_delta < kConvergence) break;
  }

  // Diffusion alone is too smooth; add back high-frequency residuals sampled
  // from known background pixels.
  std::vector<int> known;
  std::vector<double> residual;
  known.reserve(static_cast<std::size_t>(known_n));
  residual.reserve(static_cast<std::size_t>(known_n));
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) {
      if (hole(y, x)) continue;
      double s = 0.0;
      int n = 0;
      for (int dy = -kResidualRadius; dy <= kResidualRadius; ++dy) {
        for (int dx = -kResidualRadius; dx <= kResidualRadius; ++dx) {
          const int yy = y + dy;
          const int xx = x + dx;
          if (src.image.contains(yy, xx) && !hole(yy, xx)) {
            s += src.image(yy, xx);
            ++n;
          }
        }
      }
      known.push_back(y * cols + x);
      residual.push_back(src.image(y, x) - s / n);
    }
  }
  Rng rng(mix_seed(kResidualSeed, static_cast<std::uint64_t>(rows) * 65537u + cols));
  for (int idx : holes) {
    const auto pick = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(residual.size()) - 1));
    px[idx] = std::clamp(px[idx] + residual[pick], 0.0, 1.0);
  }
  return out;
}

}  // namespace detcid::synthesis
