#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "irfusion/boxes.hpp"
#include "irfusion/calibration.hpp"
#include "irfusion/geometry.hpp"
#include "irfusion/image.hpp"

namespace irfusion::align {

struct CropRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
};

/// Matched (ir, thermal) pixel locations of the same physical points.
struct CorrespondenceSet {
  std::vector<std::pair<geom::PixelPoint, geom::PixelPoint>> pairs;
};

/// Co-registered modality pair: both images share the cropped frame.
struct AlignedPair {
  img::GrayImage ir;
  img::GrayImage thermal_warped;
  CropRect crop;  // in the original IR pixel frame
};

struct LabeledFrame {
  AlignedPair pair;
  std::vector<det::GroundTruthBox> boxes;  // cropped-frame pixels, shared by both modalities
};

/// Pairs the four extreme inner corners of the board grid, in the order
/// top-left, top-right, bottom-left, bottom-right of the grid indices.
CorrespondenceSet outer_corner_correspondences(const calib::CornerObservations& ir_corners,
                                               const calib::CornerObservations& thermal_corners,
                                               const calib::ChessboardSpec& spec);

/// DLT homography mapping thermal pixels to IR pixels from >= 4 pairs.
geom::Homography alignment_homography(const CorrespondenceSet& correspondences);

/// Warps the thermal image into the IR pixel frame (h: thermal -> IR).
img::GrayImage align_thermal_to_ir(const img::GrayImage& thermal, const geom::Homography& h,
                                   int ir_w, int ir_h);

/// Crops both images to the largest axis-aligned rectangle inscribed in the
/// warped-thermal valid region; among equally large rectangles the one
/// centered nearest the region's centroid wins.
/// Throws std::runtime_error when the valid region is empty.
AlignedPair crop_common(const img::GrayImage& ir, const img::GrayImage& thermal_warped,
                        const std::vector<uint8_t>& valid_mask);

/// Shifts boxes into the cropped frame, clips them to it, and drops boxes
/// whose clipped area falls below `min_area_ratio` of the original.
std::vector<det::GroundTruthBox> propagate_labels(const std::vector<det::GroundTruthBox>& boxes,
                                                  const CropRect& crop,
                                                  double min_area_ratio = 0.2);

/// Label file: one `class cx cy w h` line per box, normalized to [0,1]
/// relative to the frame. Loading denormalizes into pixels.
std::vector<det::GroundTruthBox> load_labels(const std::string& path, int frame_w, int frame_h);
void save_labels(const std::string& path, const std::vector<det::GroundTruthBox>& boxes,
                 int frame_w, int frame_h);

}  // namespace irfusion::align
