#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "detcid/geometry.hpp"
#include "detcid/raster.hpp"
#include "detcid/rng.hpp"

namespace detcid::synthesis {

/// An acquired image with one mask per annotated cell.
struct AnnotatedImage {
  std::string id;
  GrayImage image;
  MaskStack masks;

  void validate() const;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
  friend bool operator==(const IntRange&, const IntRange&) = default;
};

struct SynthesisConfig {
  int rows = 411;
  int cols = 711;
  IntRange isolated{2, 4};
  IntRange touching{2, 4};
  IntRange crossing{2, 4};
  double max_vertical_shift = 10.0;      // psi, px
  double max_horizontal_shift = 10.0;    // chi, px
  double max_orientation_change = 15.0;  // delta, degrees
  double shear_base = 0.0;               // f
  double shear_scale = 0.1;              // e
  int quilt_window = 64;                 // w
  int quilt_block = 32;
  int quilt_overlap = 8;
  /// Blocks within (1 + tolerance) of the best overlap error are equally eligible.
  double quilt_tolerance = 0.1;
  int placement_retries = 3;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const SynthesisConfig&, const SynthesisConfig&) = default;
};

enum class PlacementKind { kIsolated, kTouchingFirst, kTouchingSecond, kCrossingFirst, kCrossingSecond };

const char* to_string(PlacementKind kind);

/// Everything drawn for one cell placement.
struct Placement {
  PlacementKind kind = PlacementKind::kIsolated;
  int pair = -1;
  int source_cell = -1;
  CellClass cell_class = CellClass::kVegetative;
  double theta = 0.0;
  Point requested;
  Point placed;  // centroid target after the in-bounds correction
  double shear = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  /// Offset drawn relative to the partner cell (second cell of a pair only).
  Point partner_offset;
  double partner_extent = 0.0;  // omega (touching) or eta (crossing) of the first cell
  int attempts = 0;
  bool skipped = false;
  int mask_index = -1;
};

struct Provenance {
  std::uint64_t seed = 0;
  int source_image = -1;
  std::string source_id;
  int patch_x = 0;
  int patch_y = 0;
  int isolated = 0;
  int touching = 0;
  int crossing = 0;
  std::vector<Placement> placements;

  int skipped() const;
};

struct SyntheticSample {
  GrayImage image;
  MaskStack truth;
  Provenance provenance;
};

/// Remove the annotated cells by diffusion fill plus re-injected background
/// texture. Only foreground pixels change.
GrayImage inpaint_background(const AnnotatedImage& src);

struct QuiltResult {
  GrayImage image;
  /// Sum of squared overlap differences along all cut paths.
  double seam_error = 0.0;
};

/// Image quilting: blocks chosen by overlap SSD, joined along minimum-error
/// boundary cuts. The output is then quantile-matched to the patch so
/// illumination drift between blocks does not shift the intensity histogram.
GrayImage quilt_texture(const GrayImage& patch, int rows, int cols, int block, int overlap,
                        Rng& rng, double tolerance = 0.1);
QuiltResult quilt_texture_with_stats(const GrayImage& patch, int rows, int cols, int block,
                                     int overlap, Rng& rng, double tolerance = 0.1);

struct PlacedCell {
  GrayImage image;
  InstanceMask mask;
  Point target;
  double shear = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  int attempts = 0;
};

/// Warp cell `cell_index` of `src`, orient its major axis to `theta`, move its
/// centroid to (x, y) (pulled inside the frame if needed) and paint it
/// opaquely over `canvas`.
PlacedCell add_cell(const AnnotatedImage& src, int cell_index, const GrayImage& canvas,
                    double theta, double x, double y, const SynthesisConfig& cfg, Rng& rng);

SyntheticSample synthesize_image(const std::vector<AnnotatedImage>& pool,
                                 const SynthesisConfig& cfg, Rng& rng);

/// Seed used for image `index` of a dataset generated with `seed`.
std::uint64_t image_seed(std::uint64_t seed, std::uint64_t index);

SyntheticSample synthesize_indexed(const std::vector<AnnotatedImage>& pool,
                                   const SynthesisConfig& cfg, std::uint64_t index);

/// Procedural stand-in for acquired SEM images: rod-shaped vegetative cells
/// and round spores on an unevenly lit, textured background.
struct ToyPoolConfig {
  int count = 4;
  int rows = 128;
  int cols = 128;
  IntRange vegetative{4, 6};
  IntRange spores{1, 2};
  double rod_length_min = 18.0;
  double rod_length_max = 26.0;
  double rod_width_min = 5.0;
  double rod_width_max = 6.0;
  double spore_diameter_min = 6.0;
  double spore_diameter_max = 8.0;
  std::uint64_t seed = 1;

  friend bool operator==(const ToyPoolConfig&, const ToyPoolConfig&) = default;
};

std::vector<AnnotatedImage> make_toy_pool(const ToyPoolConfig& cfg);

/// Small-frame settings: 64x64 images with 1 to 3 isolated cells.
SynthesisConfig toy_synthesis_config();

}  // namespace detcid::synthesis
