#pragma once

#include <string>
#include <utility>
#include <vector>

#include "irfusion/boxes.hpp"
#include "irfusion/detector.hpp"
#include "irfusion/image.hpp"

// Detection metrics: greedy score-descending matching, all-point interpolated
// average precision (VOC-2010+/COCO style), and the summary numbers a
// detection paper reports (P/R/F1 at a fixed confidence, average IoU of true
// positives, mAP@0.5, mAP@0.5:0.95), plus a wall-clock FPS benchmark.
//
// Inputs are per-frame vectors: dets[f] and gts[f] describe frame f. Matching
// never crosses frames; AP pools the per-frame match flags into one global
// score-ordered curve.

namespace irfusion::eval {

using det::Detection;
using det::GroundTruthBox;

// Per-detection match outcome, in input order.
struct DetMatch {
  bool tp = false;
  int gt = -1;        // matched ground-truth index, -1 for a false positive
  double iou = 0.0;   // IoU of the match, 0 for a false positive
};

struct MatchResult {
  std::vector<DetMatch> det;     // one per detection, input order
  std::vector<bool> gt_matched;  // one per ground-truth box
};

// Greedy matching: detections in descending score (ties: lower input index
// first) each claim the unmatched GT with the highest IoU, provided that IoU
// reaches iou_thr; ties between GTs go to the lower GT index.
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<GroundTruthBox>& gts, double iou_thr);

struct ApResult {
  double value = 0.0;
  bool zero_gt = false;  // no ground truth anywhere: AP defined as 0
};

// All-point interpolated AP over the whole dataset at one IoU threshold.
ApResult average_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<GroundTruthBox>>& gts, double iou_thr);

// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
double map_range(const std::vector<std::vector<Detection>>& dets,
                 const std::vector<std::vector<GroundTruthBox>>& gts);

struct EvalReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double avg_iou = 0.0;  // mean IoU over true positives at the confidence cut
  double map_50 = 0.0;
  double map_50_95 = 0.0;
  double fps = -1.0;  // negative until a benchmark fills it in
  bool zero_gt = false;
};

// P/R/F1/avg-IoU at the confidence threshold (score strictly greater, IoU 0.5
// matching); both mAPs are computed threshold-free from all detections.
EvalReport summarize(const std::vector<std::vector<Detection>>& dets,
                     const std::vector<std::vector<GroundTruthBox>>& gts,
                     double conf_threshold = 0.25);

struct FpsResult {
  double fps = 0.0;
  std::string hardware;  // cpu model and thread count from the build machine
};

// "model name (N hw threads)" from /proc/cpuinfo; what FpsResult::hardware holds.
std::string cpu_descriptor();

// End-to-end per-frame timing (letterbox + forward + decode + NMS) cycling
// through the given frames: warmup unmeasured passes, then `measured` timed
// passes; FPS = 1 / median frame time. The measurement loop itself is
// single-threaded so the numbers stay honest.
FpsResult fps_bench(det::DetectorModel<float>& model,
                    const std::vector<std::pair<img::GrayImage, img::GrayImage>>& frames,
                    int warmup = 10, int measured = 100);

// Report rendering: JSON with every EvalReport field plus a config echo and
// the hardware string, and a human-readable table of the same numbers.
std::string report_json(const EvalReport& r, const std::string& config_echo,
                        const std::string& hardware);
std::string report_table(const EvalReport& r);

}  // namespace irfusion::eval
