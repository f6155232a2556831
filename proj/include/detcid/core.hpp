#pragma once

#include <filesystem>
#include <vector>

#include "detcid/geometry.hpp"
#include "detcid/raster.hpp"

namespace detcid::core {

/// Inverse-mapped resampling. Grey images use bilinear interpolation, masks
/// use nearest neighbour; samples falling outside the source become 0.
GrayImage warp_affine(const GrayImage& img, const AffineTransform& t, int rows, int cols);
InstanceMask warp_affine(const InstanceMask& mask, const AffineTransform& t, int rows, int cols);

/// Bilinear sample with border clamping inside [-0.5, n - 0.5]; 0 outside.
double sample_bilinear(const GrayImage& img, double x, double y);

long long area(const InstanceMask& m);
bool is_empty(const InstanceMask& m);

Point centroid(const InstanceMask& m);

/// Orientation of the principal axis of the foreground coordinates, in
/// degrees in [0, 180). Isotropic masks return 0.
double major_axis_angle(const InstanceMask& m);

/// Ratio of the principal-axis standard deviations (>= 1); 1 for isotropic
/// or single-pixel masks.
double elongation(const InstanceMask& m);

/// |a & b| / |a | b|; 0 when both are empty.
double mask_iou(const InstanceMask& a, const InstanceMask& b);
long long intersection_area(const InstanceMask& a, const InstanceMask& b);

BoundingBox tight_bbox(const InstanceMask& m);

/// Binary morphology with a 3x3 square structuring element, `radius` times.
InstanceMask dilate(const InstanceMask& m, int radius = 1);
InstanceMask erode(const InstanceMask& m, int radius = 1);

InstanceMask mask_union(const std::vector<InstanceMask>& masks, int rows, int cols);

bool in_unit_range(const GrayImage& img);

/// 8-bit single-channel PNG; intensity i stored as round(255 i).
GrayImage read_gray_png(const std::filesystem::path& path);
void write_gray_png(const std::filesystem::path& path, const GrayImage& img);
/// Masks are stored as {0, 255}; any non-zero pixel reads back as foreground.
InstanceMask read_mask_png(const std::filesystem::path& path);
void write_mask_png(const std::filesystem::path& path, const InstanceMask& mask);

/// Quantize to the 8-bit grid used by the PNG encoding.
GrayImage quantize(const GrayImage& img);

}  // namespace detcid::core
