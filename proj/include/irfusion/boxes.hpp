#pragma once

#include <algorithm>
#include <vector>

namespace irfusion::det {

/// Axis-aligned box in center format, pixels.
struct GroundTruthBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  int class_id = 0;
};

struct Detection {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
  double objectness = 0.0;
  std::vector<double> class_probs;
  double score = 0.0;  // objectness * max class prob
  int class_id = 0;
};

/// Intersection-over-union of two center-format boxes (corner arithmetic).
template <typename A, typename B>
double box_iou(const A& a, const B& b) {
  const double ax0 = a.cx - a.w / 2.0, ax1 = a.cx + a.w / 2.0;
  const double ay0 = a.cy - a.h / 2.0, ay1 = a.cy + a.h / 2.0;
  const double bx0 = b.cx - b.w / 2.0, bx1 = b.cx + b.w / 2.0;
  const double by0 = b.cy - b.h / 2.0, by1 = b.cy + b.h / 2.0;
  const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace irfusion::det
