#include "irfusion/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace irfusion::align {

CorrespondenceSet outer_corner_correspondences(const calib::CornerObservations& ir_corners,
                                               const calib::CornerObservations& thermal_corners,
                                               const calib::ChessboardSpec& spec) {
  const size_t expected = static_cast<size_t>(spec.inner_rows) * spec.inner_cols;
  if (ir_corners.corners.size() != expected || thermal_corners.corners.size() != expected) {
    throw std::invalid_argument("outer_corner_correspondences: corner count mismatch");
  }
  const int cols = spec.inner_cols;
  const int rows = spec.inner_rows;
  const int idx[4] = {0, cols - 1, (rows - 1) * cols, rows * cols - 1};
  CorrespondenceSet out;
  for (const int i : idx) {
    out.pairs.emplace_back(ir_corners.corners[i], thermal_corners.corners[i]);
  }
  return out;
}

geom::Homography alignment_homography(const CorrespondenceSet& correspondences) {
  std::vector<std::pair<geom::PixelPoint, geom::PixelPoint>> thermal_to_ir;
  thermal_to_ir.reserve(correspondences.pairs.size());
  for (const auto& [ir, thermal] : correspondences.pairs) {
    thermal_to_ir.emplace_back(thermal, ir);
  }
  return geom::estimate_homography(thermal_to_ir);
}

img::GrayImage align_thermal_to_ir(const img::GrayImage& thermal, const geom::Homography& h,
                                   int ir_w, int ir_h) {
  return img::warp_image(thermal, h, ir_w, ir_h);
}

AlignedPair crop_common(const img::GrayImage& ir, const img::GrayImage& thermal_warped,
                        const std::vector<uint8_t>& valid_mask) {
  const int w = ir.width, h = ir.height;
  if (thermal_warped.width != w || thermal_warped.height != h ||
      valid_mask.size() != static_cast<size_t>(w) * h) {
    throw std::invalid_argument("crop_common: input dimensions disagree");
  }

  double sum_x = 0.0, sum_y = 0.0;
  size_t valid = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (valid_mask[static_cast<size_t>(y) * w + x]) {
        sum_x += x;
        sum_y += y;
        ++valid;
      }
    }
  }
  if (valid == 0) throw std::runtime_error("crop_common: no overlap between modalities");

  const double cen_x = sum_x / static_cast<double>(valid);
  const double cen_y = sum_y / static_cast<double>(valid);

  // Largest rectangle in the valid region (histogram sweep per row); among
  // equal areas, prefer the rectangle whose center is nearest the centroid.
  long best_area = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  CropRect crop{0, 0, 0, 0};
  const auto consider = [&](int x0, int y0, int cw, int ch) {
    const long area = static_cast<long>(cw) * ch;
    if (area < best_area) return;
    const double dx = (x0 + (cw - 1) / 2.0) - cen_x;
    const double dy = (y0 + (ch - 1) / 2.0) - cen_y;
    const double dist = dx * dx + dy * dy;
    if (area > best_area || dist < best_dist - 1e-12) {
      best_area = area;
      best_dist = dist;
      crop = {x0, y0, cw, ch};
    }
  };

  std::vector<int> heights(w, 0);
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      heights[x] = valid_mask[static_cast<size_t>(y) * w + x] ? heights[x] + 1 : 0;
    }
    stack.clear();
    for (int x = 0; x <= w; ++x) {
      const int cur = x < w ? heights[x] : 0;
      while (!stack.empty() && heights[stack.back()] >= cur) {
        const int hh = heights[stack.back()];
        stack.pop_back();
        if (hh == 0) continue;
        const int left = stack.empty() ? 0 : stack.back() + 1;
        consider(left, y - hh + 1, x - left, hh);
      }
      stack.push_back(x);
    }
  }

  AlignedPair out;
  out.crop = crop;
  out.ir = img::GrayImage(crop.w, crop.h);
  out.thermal_warped = img::GrayImage(crop.w, crop.h);
  for (int y = 0; y < crop.h; ++y) {
    for (int x = 0; x < crop.w; ++x) {
      out.ir.at(x, y) = ir.at(crop.x + x, crop.y + y);
      out.thermal_warped.at(x, y) = thermal_warped.at(crop.x + x, crop.y + y);
    }
  }
  return out;
}

std::vector<det::GroundTruthBox> propagate_labels(const std::vector<det::GroundTruthBox>& boxes,
                                                  const CropRect& crop, double min_area_ratio) {
  std::vector<det::GroundTruthBox> out;
  for (const det::GroundTruthBox& b : boxes) {
    const double x0 = std::max(b.cx - b.w / 2.0 - crop.x, 0.0);
    const double y0 = std::max(b.cy - b.h / 2.0 - crop.y, 0.0);
    const double x1 = std::min(b.cx + b.w / 2.0 - crop.x, static_cast<double>(crop.w));
    const double y1 = std::min(b.cy + b.h / 2.0 - crop.y, static_cast<double>(crop.h));
    const double cw = x1 - x0, ch = y1 - y0;
    if (cw <= 0.0 || ch <= 0.0) continue;
    if (cw * ch < min_area_ratio * b.w * b.h) continue;
    out.push_back({(x0 + x1) / 2.0, (y0 + y1) / 2.0, cw, ch, b.class_id});
  }
  return out;
}

std::vector<det::GroundTruthBox> load_labels(const std::string& path, int frame_w, int frame_h) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_labels: cannot open " + path);
  std::vector<det::GroundTruthBox> boxes;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    det::GroundTruthBox b;
    double cx, cy, w, h;
    if (!(ss >> b.class_id >> cx >> cy >> w >> h)) {
      throw std::runtime_error("load_labels: malformed line " + std::to_string(lineno) + " in " +
                               path);
    }
    b.cx = cx * frame_w;
    b.cy = cy * frame_h;
    b.w = w * frame_w;
    b.h = h * frame_h;
    boxes.push_back(b);
  }
  return boxes;
}

void save_labels(const std::string& path, const std::vector<det::GroundTruthBox>& boxes,
                 int frame_w, int frame_h) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_labels: cannot open " + path);
  char buf[160];
  for (const det::GroundTruthBox& b : boxes) {
    std::snprintf(buf, sizeof(buf), "%d %.17g %.17g %.17g %.17g\n", b.class_id, b.cx / frame_w,
                  b.cy / frame_h, b.w / frame_w, b.h / frame_h);
    f << buf;
  }
}

}  // namespace irfusion::align
