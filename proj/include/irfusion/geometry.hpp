#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace irfusion::geom {

struct PixelPoint {
  double u = 0.0;
  double v = 0.0;
};

/// Camera-plane coordinates at unit depth.
struct NormalizedPoint {
  double x = 0.0;
  double y = 0.0;
};

/// World coordinates in millimeters.
struct WorldPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

/// Pinhole intrinsics with zero skew. Focal lengths and principal point in pixels.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
};

/// Brown-Conrady lens distortion: radial k1..k3, tangential p1, p2.
/// All-zero means no distortion.
struct Distortion {
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
  double p1 = 0.0;
  double p2 = 0.0;
};

/// Rigid camera pose: row-major rotation matrix plus translation in millimeters.
struct Pose {
  std::array<double, 9> r{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> t{0, 0, 0};
};

/// 3x3 projective map, row-major. The projective scale is irrelevant when
/// applying; normalized() fixes unit Frobenius norm and a sign convention
/// (h33 >= 0; if h33 == 0, first nonzero entry in row-major order positive)
/// so equality testing is well-defined.
struct Homography {
  std::array<double, 9> h{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return Homography{}; }
  [[nodiscard]] Homography normalized() const;
  [[nodiscard]] Homography inverse() const;
  [[nodiscard]] double det() const;
};

Homography multiply(const Homography& a, const Homography& b);

/// Checks r is a proper rotation: r^T r = I and det = +1 within tol.
bool is_rotation(const std::array<double, 9>& r, double tol = 1e-9);

std::array<double, 9> rotation_from_axis_angle(const std::array<double, 3>& aa);
std::array<double, 3> axis_angle_from_rotation(const std::array<double, 9>& r);

/// Nearest rotation matrix in Frobenius norm (orthogonal polar factor, det +1).
std::array<double, 9> nearest_rotation(const std::array<double, 9>& m);

NormalizedPoint to_normalized(const PixelPoint& p, const Intrinsics& k);
PixelPoint to_pixel(const NormalizedPoint& p, const Intrinsics& k);

/// Combined Brown-Conrady displacement on normalized coordinates:
///   x' = x*(1 + k1 r^2 + k2 r^4 + k3 r^6) + 2 p1 x y + p2 (r^2 + 2 x^2)
///   y' = y*(1 + k1 r^2 + k2 r^4 + k3 r^6) + p1 (r^2 + 2 y^2) + 2 p2 x y
NormalizedPoint distort(const NormalizedPoint& p, const Distortion& d);

/// Inverse of distort() by fixed-point iteration (cap 20, step threshold 1e-10).
/// Throws std::runtime_error naming the point if the iteration does not converge.
NormalizedPoint undistort_point(const NormalizedPoint& p_distorted, const Distortion& d);

/// Full pinhole chain: world -> camera frame -> perspective divide -> distort -> pixels.
/// Throws std::invalid_argument if the camera-frame depth is not positive.
PixelPoint project(const WorldPoint& w, const Pose& pose, const Intrinsics& k,
                   const Distortion& d);

/// Applies h with the perspective divide. Invariant under positive scaling of h.
/// Throws std::runtime_error when the denominator is below 1e-12 in magnitude.
PixelPoint apply_homography(const Homography& h, const PixelPoint& p);

/// Normalized DLT from >= 4 correspondences (src -> dst). Hartley normalization
/// of both sets, smallest-singular-vector solve, canonical normalization.
/// Throws std::invalid_argument on fewer than 4 pairs and std::runtime_error
/// on a degenerate configuration.
Homography estimate_homography(const std::vector<std::pair<PixelPoint, PixelPoint>>& pairs);

/// Plain text, 9 whitespace-separated decimals, row-major, 17 significant digits.
void save_homography(const std::string& path, const Homography& h);
Homography load_homography(const std::string& path);

}  // namespace irfusion::geom
