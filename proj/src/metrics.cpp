#include "irfusion/metrics.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace irfusion::eval {

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<GroundTruthBox>& gts, double iou_thr) {
  MatchResult r;
  r.det.resize(dets.size());
  r.gt_matched.assign(gts.size(), false);

  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return dets[a].score > dets[b].score;  // stable keeps input order on ties
  });

  for (const size_t di : order) {
    double best_iou = 0.0;
    int best_gt = -1;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (r.gt_matched[gi]) continue;
      const double q = box_iou(dets[di], gts[gi]);
      if (q > best_iou) {  // strictly greater: ties keep the lower GT index
        best_iou = q;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_thr) {
      r.det[di] = {true, best_gt, best_iou};
      r.gt_matched[best_gt] = true;
    }
  }
  return r;
}

namespace {

void check_frames(const std::vector<std::vector<Detection>>& dets,
                  const std::vector<std::vector<GroundTruthBox>>& gts) {
  if (dets.size() != gts.size()) {
    throw std::invalid_argument("eval: " + std::to_string(dets.size()) +
                                " detection frames vs " + std::to_string(gts.size()) +
                                " ground-truth frames");
  }
}

struct ScoredFlag {
  double score;
  int frame;
  int index;
  bool tp;
};

// per-frame matching (parallel-safe: frames are independent), pooled into one
// global descending-score list with deterministic tie-breaks
std::vector<ScoredFlag> pooled_flags(const std::vector<std::vector<Detection>>& dets,
                                     const std::vector<std::vector<GroundTruthBox>>& gts,
                                     double iou_thr) {
  const int frames = static_cast<int>(dets.size());
  std::vector<std::vector<ScoredFlag>> per_frame(frames);
#pragma omp parallel for schedule(static)
  for (int f = 0; f < frames; ++f) {
    const MatchResult m = match_detections(dets[f], gts[f], iou_thr);
    per_frame[f].reserve(dets[f].size());
    for (size_t i = 0; i < dets[f].size(); ++i) {
      per_frame[f].push_back({dets[f][i].score, f, static_cast<int>(i), m.det[i].tp});
    }
  }
  std::vector<ScoredFlag> all;
  for (int f = 0; f < frames; ++f) {  // fixed aggregation order
    all.insert(all.end(), per_frame[f].begin(), per_frame[f].end());
  }
  std::sort(all.begin(), all.end(), [](const ScoredFlag& a, const ScoredFlag& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.index < b.index;
  });
  return all;
}

}  // namespace

ApResult average_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<GroundTruthBox>>& gts, double iou_thr) {
  check_frames(dets, gts);
  size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.size();
  if (total_gt == 0) return {0.0, true};

  const std::vector<ScoredFlag> all = pooled_flags(dets, gts, iou_thr);

  // cumulative precision/recall points, precision envelope from the right,
  // area under the step curve
  std::vector<double> prec(all.size()), rec(all.size());
  int tp = 0;
  for (size_t i = 0; i < all.size(); ++i) {
    if (all[i].tp) ++tp;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
  }
  double env = 0.0, ap = 0.0;
  for (size_t i = all.size(); i-- > 0;) {
    env = std::max(env, prec[i]);
    const double lower = i == 0 ? 0.0 : rec[i - 1];
    if (rec[i] > lower) ap += (rec[i] - lower) * env;
  }
  return {ap, false};
}

double map_range(const std::vector<std::vector<Detection>>& dets,
                 const std::vector<std::vector<GroundTruthBox>>& gts) {
  double sum = 0.0;
  for (int k = 0; k < 10; ++k) {
    sum += average_precision(dets, gts, 0.50 + 0.05 * k).value;
  }
  return sum / 10.0;
}

EvalReport summarize(const std::vector<std::vector<Detection>>& dets,
                     const std::vector<std::vector<GroundTruthBox>>& gts,
                     double conf_threshold) {
  check_frames(dets, gts);
  EvalReport r;

  const int frames = static_cast<int>(dets.size());
  std::vector<std::array<double, 4>> acc(frames, {0, 0, 0, 0});  // tp, fp, gt, iou_sum
#pragma omp parallel for schedule(static)
  for (int f = 0; f < frames; ++f) {
    std::vector<Detection> kept;
    for (const Detection& d : dets[f]) {
      if (d.score > conf_threshold) kept.push_back(d);
    }
    const MatchResult m = match_detections(kept, gts[f], 0.5);
    for (const DetMatch& dm : m.det) {
      if (dm.tp) {
        acc[f][0] += 1.0;
        acc[f][3] += dm.iou;
      } else {
        acc[f][1] += 1.0;
      }
    }
    acc[f][2] = static_cast<double>(gts[f].size());
  }
  double tp = 0, fp = 0, gt_count = 0, iou_sum = 0;
  for (int f = 0; f < frames; ++f) {  // fixed aggregation order
    tp += acc[f][0];
    fp += acc[f][1];
    gt_count += acc[f][2];
    iou_sum += acc[f][3];
  }

  r.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  r.recall = gt_count > 0 ? tp / gt_count : 0.0;
  r.f1 = r.precision + r.recall > 0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  r.avg_iou = tp > 0 ? iou_sum / tp : 0.0;

  const ApResult ap50 = average_precision(dets, gts, 0.5);
  r.map_50 = ap50.value;
  r.zero_gt = ap50.zero_gt;
  r.map_50_95 = map_range(dets, gts);
  return r;
}

std::string cpu_descriptor() {
  std::string name = "unknown cpu";
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    const auto pos = line.find("model name");
    if (pos != std::string::npos) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        name = line.substr(colon + 1);
        const auto start = name.find_first_not_of(" \t");
        if (start != std::string::npos) name = name.substr(start);
      }
      break;
    }
  }
  const unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  return name + " (" + std::to_string(threads) + " hw thread" + (threads == 1 ? "" : "s") + ")";
}

FpsResult fps_bench(det::DetectorModel<float>& model,
                    const std::vector<std::pair<img::GrayImage, img::GrayImage>>& frames,
                    int warmup, int measured) {
  if (frames.empty()) throw std::invalid_argument("fps_bench: no frames");
  if (measured < 1) throw std::invalid_argument("fps_bench: measured must be >= 1");

  model.graph.set_mode(nn::Graph<float>::Mode::Eval);
  const auto run_one = [&](size_t i) {
    const auto& [ir, th] = frames[i % frames.size()];
    const bool use_ir = model.config.mode != det::Mode::SingleThermal;
    const bool use_th = model.config.mode != det::Mode::SingleIr;
    static_cast<void>(det::infer_pair(model, use_ir ? &ir : nullptr, use_th ? &th : nullptr));
  };

  for (int i = 0; i < warmup; ++i) run_one(static_cast<size_t>(i));

  std::vector<double> seconds(static_cast<size_t>(measured));
  for (int i = 0; i < measured; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_one(static_cast<size_t>(warmup + i));
    const auto t1 = std::chrono::steady_clock::now();
    seconds[static_cast<size_t>(i)] = std::chrono::duration<double>(t1 - t0).count();
  }
  std::nth_element(seconds.begin(), seconds.begin() + seconds.size() / 2, seconds.end());
  const double median = seconds[seconds.size() / 2];

  FpsResult r;
  r.fps = median > 0.0 ? 1.0 / median : 0.0;
  r.hardware = cpu_descriptor();
  return r;
}

std::string report_json(const EvalReport& r, const std::string& config_echo,
                        const std::string& hardware) {
  nlohmann::ordered_json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["avg_iou"] = r.avg_iou;
  j["map_50"] = r.map_50;
  j["map_50_95"] = r.map_50_95;
  if (r.fps >= 0.0) j["fps"] = r.fps;
  j["zero_gt"] = r.zero_gt;
  j["ap_interpolation"] = "all-point";
  j["config"] = config_echo;
  j["hardware"] = hardware;
  return j.dump(2);
}

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "Avg. IoU  Recall  Precision  F1-Score  mAP@0.50  mAP@0.5:0.95";
  if (r.fps >= 0.0) os << "  FPS";
  os << "\n";
  os << r.avg_iou << "    " << r.recall << "  " << r.precision << "     " << r.f1 << "    "
     << r.map_50 << "    " << r.map_50_95;
  if (r.fps >= 0.0) {
    os.precision(2);
    os << "        " << r.fps;
  }
  os << "\n";
  return os.str();
}

}  // namespace irfusion::eval
