#pragma once

#include <string>
#include <vector>

#include "irfusion/geometry.hpp"

namespace irfusion::calib {

/// Planar calibration target described by its inner-corner grid.
/// Distinct row/column counts are recommended so orientation is unambiguous.
struct ChessboardSpec {
  int inner_rows = 0;
  int inner_cols = 0;
  double square_size = 0.0;  // millimeters
};

/// Ordered inner-corner observations for one view, row-major over the grid.
struct CornerObservations {
  std::string view_id;
  std::vector<geom::PixelPoint> corners;
};

struct CalibrationResult {
  geom::Intrinsics intrinsics;
  geom::Distortion distortion;
  std::vector<geom::Pose> poses;  // one per view, board frame to camera frame
  double rms_reprojection = 0.0;  // pixels
};

/// Board-frame corner grid: row-major, z = 0, x = col * square, y = row * square.
std::vector<geom::WorldPoint> planar_target_points(const ChessboardSpec& spec);

/// Closed-form intrinsics from >= 3 board homographies (zero-skew absolute-conic
/// constraints, smallest-singular-vector solve). Throws std::invalid_argument on
/// fewer than 3 views and std::runtime_error on a degenerate view set.
geom::Intrinsics init_intrinsics_zhang(const std::vector<geom::Homography>& view_homographies);

/// Pose from a board homography given intrinsics: r1, r2, t from K^-1 h with
/// scale 1/|K^-1 h1|, r3 = r1 x r2, polar projection to the nearest rotation.
/// The sign is chosen so t.z > 0; throws std::runtime_error if neither sign works.
geom::Pose init_extrinsics(const geom::Homography& h, const geom::Intrinsics& k);

/// Levenberg-Marquardt refinement of intrinsics, distortion, and all poses
/// against the observed corners (axis-angle rotation parameterization,
/// numeric Jacobians). Never returns a result with higher rms than the input;
/// throws std::runtime_error only if the damping schedule overflows.
CalibrationResult refine_calibration(const CalibrationResult& init,
                                     const std::vector<CornerObservations>& observations,
                                     const ChessboardSpec& spec);

/// Root-mean-square pixel reprojection error over every corner of every view.
double reprojection_rms(const CalibrationResult& result,
                        const std::vector<CornerObservations>& observations,
                        const ChessboardSpec& spec);

/// Full pipeline: per-view DLT homographies, closed-form intrinsics, extrinsic
/// recovery, then two LM passes (k3 pinned at zero in the first, free in the
/// second). Requires >= 3 views of a board with >= 3x3 inner corners.
CalibrationResult calibrate(const std::vector<CornerObservations>& observations,
                            const ChessboardSpec& spec);

/// Corner annotation CSV: header `view_id,corner_index,u,v`, row-major indices.
std::vector<CornerObservations> load_corners_csv(const std::string& path);
void save_corners_csv(const std::string& path, const std::vector<CornerObservations>& observations);

/// Calibration JSON: flat keys fx..p2 and rms plus a views array of
/// {rotation_axis_angle, translation}; numbers round-trip exactly.
void save_calibration_json(const std::string& path, const CalibrationResult& result);
CalibrationResult load_calibration_json(const std::string& path);

}  // namespace irfusion::calib
