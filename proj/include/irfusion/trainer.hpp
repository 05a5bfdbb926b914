#pragma once

#include <functional>
#include <string>
#include <vector>

#include "irfusion/detector.hpp"
#include "irfusion/image.hpp"

namespace irfusion::train {

/// One aligned pair with ground truth, in the sample's own pixel frame.
/// Samples may have any size; the trainer letterboxes them to the network
/// frame with exactly the preprocessing inference uses.
struct TrainSample {
  img::GrayImage ir;
  img::GrayImage thermal;
  std::vector<det::GroundTruthBox> boxes;
};

enum class LrSchedule { Constant, Cosine };

struct HyperParams {
  int epochs = 100;
  int batch_size = 32;
  double lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  uint64_t seed = 1;
  // Cosine anneals the epoch's rate to lr * 0.5 * (1 + cos(pi * e / epochs));
  // the final epochs then refine box geometry instead of bouncing around it.
  LrSchedule lr_schedule = LrSchedule::Constant;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double loss_total = 0.0;
  double loss_loc = 0.0;
  double loss_obj = 0.0;
  double loss_cls = 0.0;
};

/// He-uniform weights everywhere, then objectness head biases at -4.6 so the
/// untrained model predicts "no object" (sigmoid ~ 0.01) and early epochs are
/// not swamped by objectness false positives.
void init_model(det::DetectorModel<float>& model, uint64_t seed);

/// Shuffled minibatch Adam on the three-term detection loss. Deterministic
/// given the seed: the sample order is the only random input, and forward,
/// backward, and the optimizer are bit-reproducible. Returns per-epoch mean
/// losses (weighted by batch size); `on_epoch`, when given, fires after each
/// epoch. Throws std::invalid_argument for an empty dataset or bad hyperparams.
std::vector<EpochStats> train(det::DetectorModel<float>& model,
                              const std::vector<TrainSample>& dataset, const HyperParams& hp,
                              const std::function<void(const EpochStats&)>& on_epoch = {});

/// Loss curve CSV: header `epoch,loss_total,loss_loc,loss_obj,loss_cls`
/// followed by one row per epoch.
void write_loss_csv(const std::string& path, const std::vector<EpochStats>& log);

/// Replaces the config's anchors with six fitted to the dataset's boxes:
/// k-means (k = 6) under the shape-IoU distance on letterboxed box sizes,
/// deterministic quantile seeding, smallest three anchors to the stride-16
/// head and largest three to the stride-32 head. Throws std::invalid_argument
/// when the samples carry fewer than six boxes.
void fit_anchors(det::ModelConfig& cfg, const std::vector<TrainSample>& samples);

/// Loads samples from a generated dataset directory (ir/, thermal/, labels/,
/// manifest.json), keeping frames whose manifest split matches `split`
/// ("train", "val", "test", or "all"). Throws std::runtime_error when the
/// manifest or a referenced file is missing.
std::vector<TrainSample> load_split(const std::string& root, const std::string& split);

/// Runs inference over every sample (eval mode, letterboxed) and returns the
/// per-frame detections next to the per-frame ground truth, ready for the
/// metrics kit. A low confidence floor keeps the ranking usable for AP.
struct SplitDetections {
  std::vector<std::vector<det::Detection>> dets;
  std::vector<std::vector<det::GroundTruthBox>> gts;
};
SplitDetections detect_split(det::DetectorModel<float>& model,
                             const std::vector<TrainSample>& samples,
                             double conf_threshold = 0.001, double iou_threshold = 0.45);

}  // namespace irfusion::train
