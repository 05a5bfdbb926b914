#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "irfusion/geometry.hpp"

namespace irfusion::img {

/// Single-channel image, row-major, intensities in [0,1].
/// Loaded from / saved to 8-bit grayscale PNG (linear mapping).
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> px;

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.0f);

  float at(int x, int y) const { return px[static_cast<size_t>(y) * width + x]; }
  float& at(int x, int y) { return px[static_cast<size_t>(y) * width + x]; }
  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
};

GrayImage load_png(const std::string& path);
void save_png(const std::string& path, const GrayImage& img);

/// Bilinear sample at real coordinates (pixel centers at integer coordinates).
/// Samples outside the image contribute `fill`.
double bilinear_sample(const GrayImage& img, double x, double y, double fill = 0.0);

/// True when all four bilinear neighbors of (x, y) are inside the image.
bool sample_fully_inside(const GrayImage& img, double x, double y);

/// Inverse warp: out(u, v) = img(h^-1 (u, v)) with bilinear interpolation,
/// zero fill outside. Throws std::runtime_error for a non-invertible h.
GrayImage warp_image(const GrayImage& img, const geom::Homography& h, int out_w, int out_h,
                     float fill = 0.0f);

/// Coverage of warp_image: 1 where the source sample is fully inside bounds.
std::vector<uint8_t> warp_valid_mask(const geom::Homography& h, int src_w, int src_h,
                                     int out_w, int out_h);

/// Inverse-map undistortion: for each output pixel, back-project through k,
/// apply the forward distortion, re-project and bilinear-sample the input.
GrayImage undistort_image(const GrayImage& img, const geom::Intrinsics& k,
                          const geom::Distortion& d);

/// Bilinear resize to (out_w, out_h).
GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h);

}  // namespace irfusion::img
