#include <algorithm>
#include <limits>
#include <vector>

#include "detcid/error.hpp"
#include "detcid/synthesis.hpp"

namespace detcid::synthesis {

namespace {

/// Column index of the minimum-cost top-to-bottom path through `err`
/// (height x width, row-major), one entry per row.
std::vector<int> min_vertical_cut(const std::vector<double>& err, int height, int width,
                                  double& path_cost) {
  std::vector<double> cum(err);
  std::vector<int> from(err.size(), 0);
  for (int i = 1; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      int best = j;
      double best_cost = cum[(i - 1) * width + j];
      for (int dj : {-1, 1}) {
        const int k = j + dj;
        if (k < 0 || k >= width) continue;
        const double c = cum[(i - 1) * width + k];
        if (c < best_cost) {
          best_cost = c;
          best = k;
        }
      }
      cum[i * width + j] += best_cost;
      from[i * width + j] = best;
    }
  }
  std::vector<int> cut(height);
  int j = 0;
  for (int k = 1; k < width; ++k) {
    if (cum[(height - 1) * width + k] < cum[(height - 1) * width + j]) j = k;
  }
  path_cost = cum[(height - 1) * width + j];
  for (int i = height - 1; i >= 0; --i) {
    cut[i] = j;
    j = from[i * width + j];
  }
  return cut;
}

/// Exact quantile mapping of `img` onto the value distribution of `ref`.
void match_histogram(GrayImage& img, const GrayImage& ref) {
  std::vector<double> sorted_ref(ref.storage());
  std::sort(sorted_ref.begin(), sorted_ref.end());
  auto& px = img.storage();
  std::vector<std::size_t> order(px.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return px[a] < px[b]; });
  const double n = static_cast<double>(px.size());
  const double m = static_cast<double>(sorted_ref.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto k = static_cast<std::size_t>((static_cast<double>(r) + 0.5) * m / n);
    px[order[r]] = sorted_ref[std::min(k, sorted_ref.size() - 1)];
  }
}

}  // namespace

QuiltResult quilt_texture_with_stats(const GrayImage& patch, int rows, int cols, int block,
                                     int overlap, Rng& rng, double tolerance) {
  if (rows < 1 || cols < 1) throw Error(ErrorCode::kInvalidConfig, "quilt: empty output size");
  if (block < 1 || block > std::min(patch.rows(), patch.cols())) {
    throw Error(ErrorCode::kInvalidConfig, "quilt: block larger than the source patch");
  }
  if (overlap < 0 || overlap >= block) {
    throw Error(ErrorCode::kInvalidConfig, "quilt: overlap must be in [0, block)");
  }

  const int step = block - overlap;
  const int nby = std::max(1, (rows - overlap + step - 1) / step);
  const int nbx = std::max(1, (cols - overlap + step - 1) / step);
  const int big_rows = nby * step + overlap;
  const int big_cols = nbx * step + overlap;
  GrayImage canvas(big_rows, big_cols, 0.0);

  const int max_py = patch.rows() - block;
  const int max_px = patch.cols() - block;
  std::vector<double> costs(static_cast<std::size_t>(max_py + 1) * (max_px + 1));
  double seam_error = 0.0;

  for (int by = 0; by < nby; ++by) {
    for (int bx = 0; bx < nbx; ++bx) {
      const int oy = by * step;
      const int ox = bx * step;
      const bool left = bx > 0 && overlap > 0;
      const bool top = by > 0 && overlap > 0;

      int py = 0, px = 0;
      if (!left && !top) {
        py = static_cast<int>(rng.uniform_int(0, max_py));
        px = static_cast<int>(rng.uniform_int(0, max_px));
      } else {
        double best = std::numeric_limits<double>::infinity();
        for (int cy = 0; cy <= max_py; ++cy) {
          for (int cx = 0; cx <= max_px; ++cx) {
            double c = 0.0;
            for (int i = 0; i < block; ++i) {
              const int jmax = (top && i < overlap) ? block : (left ? overlap : 0);
              for (int j = 0; j < jmax; ++j) {
                const double d = canvas(oy + i, ox + j) - patch(cy + i, cx + j);
                c += d * d;
              }
            }
            costs[static_cast<std::size_t>(cy) * (max_px + 1) + cx] = c;
            best = std::min(best, c);
          }
        }
        const double limit = best * (1.0 + tolerance);
        std::vector<int> eligible;
        for (std::size_t k = 0; k < costs.size(); ++k) {
          if (costs[k] <= limit) eligible.push_back(static_cast<int>(k));
        }
        const int pick = eligible[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(eligible.size()) - 1))];
        py = pick / (max_px + 1);
        px = pick % (max_px + 1);
      }

      // take_new(i, j): pixel (i, j) of the block comes from the new patch.
      std::vector<std::uint8_t> take_new(static_cast<std::size_t>(block) * block, 1);
      if (left) {
        std::vector<double> err(static_cast<std::size_t>(block) * overlap);
        for (int i = 0; i < block; ++i) {
          for (int j = 0; j < overlap; ++j) {
            const double d = canvas(oy + i, ox + j) - patch(py + i, px + j);
            err[i * overlap + j] = d * d;
          }
        }
        double cost = 0.0;
        const auto cut = min_vertical_cut(err, block, overlap, cost);
        seam_error += cost;
        for (int i = 0; i < block; ++i) {
          for (int j = 0; j < cut[i]; ++j) take_new[i * block + j] = 0;
        }
      }
      if (top) {
        // Horizontal cut = vertical cut of the transposed overlap strip.
        std::vector<double> err(static_cast<std::size_t>(block) * overlap);
        for (int j = 0; j < block; ++j) {
          for (int i = 0; i < overlap; ++i) {
            const double d = canvas(oy + i, ox + j) - patch(py + i, px + j);
            err[j * overlap + i] = d * d;
          }
        }
        double cost = 0.0;
        const auto cut = min_vertical_cut(err, block, overlap, cost);
        seam_error += cost;
        for (int j = 0; j < block; ++j) {
          for (int i = 0; i < cut[j]; ++i) take_new[i * block + j] = 0;
        }
      }
      for (int i = 0; i < block; ++i) {
        for (int j = 0; j < block; ++j) {
          if (take_new[i * block + j]) canvas(oy + i, ox + j) = patch(py + i, px + j);
        }
      }
    }
  }

  QuiltResult result{GrayImage(rows, cols), seam_error};
  for (int y = 0; y < rows; ++y) {
    for (int x = 0; x < cols; ++x) result.image(y, x) = canvas(y, x);
  }
  match_histogram(result.image, patch);
  return result;
}

GrayImage quilt_texture(const GrayImage& patch, int rows, int cols, int block, int overlap,
                        Rng& rng, double tolerance) {
  return quilt_texture_with_stats(patch, rows, cols, block, overlap, rng, tolerance).image;
}

}  // namespace detcid::synthesis
