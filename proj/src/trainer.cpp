#include "irfusion/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "irfusion/alignment.hpp"
#include "irfusion/nn/adam.hpp"
#include "irfusion/nn/rng.hpp"
#include "json.hpp"

namespace irfusion::train {

namespace {

struct NetSample {
  nn::Tensor<float> ir;       // (1,1,S,S); empty when the mode has no IR stream
  nn::Tensor<float> thermal;  // likewise
  std::vector<det::GroundTruthBox> boxes;  // network-frame pixels
};

nn::Tensor<float> to_net_tensor(const img::GrayImage& im, int size, const det::Letterbox& lb) {
  const img::GrayImage boxed = det::letterbox_image(im, size, lb);
  return det::image_to_tensor<float>(boxed);
}

// letterbox one sample into the network frame, boxes included
NetSample preprocess(const TrainSample& s, const det::ModelConfig& cfg) {
  if (s.ir.width != s.thermal.width || s.ir.height != s.thermal.height) {
    throw std::invalid_argument("train: sample modality dimensions differ (" +
                                std::to_string(s.ir.width) + "x" + std::to_string(s.ir.height) +
                                " vs " + std::to_string(s.thermal.width) + "x" +
                                std::to_string(s.thermal.height) + ")");
  }
  const det::Letterbox lb = det::letterbox_params(s.ir.width, s.ir.height, cfg.input_size);
  NetSample out;
  if (cfg.mode != det::Mode::SingleThermal) out.ir = to_net_tensor(s.ir, cfg.input_size, lb);
  if (cfg.mode != det::Mode::SingleIr) {
    out.thermal = to_net_tensor(s.thermal, cfg.input_size, lb);
  }
  out.boxes.reserve(s.boxes.size());
  for (const det::GroundTruthBox& b : s.boxes) {
    det::GroundTruthBox nb = b;
    det::letterbox_apply(lb, b.cx, b.cy, nb.cx, nb.cy);
    nb.w = b.w * lb.scale;
    nb.h = b.h * lb.scale;
    out.boxes.push_back(nb);
  }
  return out;
}

// stack per-sample (1,1,S,S) tensors for the given indices into (B,1,S,S)
nn::Tensor<float> stack_batch(const std::vector<NetSample>& samples,
                              const std::vector<size_t>& order, size_t first, size_t count,
                              bool thermal) {
  const nn::Tensor<float>& t0 = thermal ? samples[order[first]].thermal : samples[order[first]].ir;
  nn::Tensor<float> out(static_cast<int>(count), t0.c, t0.h, t0.w);
  const size_t per = t0.size();
  for (size_t i = 0; i < count; ++i) {
    const nn::Tensor<float>& src =
        thermal ? samples[order[first + i]].thermal : samples[order[first + i]].ir;
    std::copy(src.v.begin(), src.v.end(), out.v.begin() + static_cast<long>(i * per));
  }
  return out;
}

}  // namespace

void init_model(det::DetectorModel<float>& model, uint64_t seed) {
  nn::Rng rng(seed);
  model.graph.init_weights(rng);
  const int per = 5 + model.config.num_classes;
  for (const int head : {model.head16, model.head32}) {
    const int bidx = model.graph.nodes[head].bidx;
    nn::Tensor<float>& bias = model.graph.params[bidx].value;
    for (int a = 0; a < 3; ++a) bias.v[static_cast<size_t>(a * per + 4)] = -4.6f;
  }
}

std::vector<EpochStats> train(det::DetectorModel<float>& model,
                              const std::vector<TrainSample>& dataset, const HyperParams& hp,
                              const std::function<void(const EpochStats&)>& on_epoch) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  if (hp.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (hp.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(hp.lr > 0.0)) throw std::invalid_argument("train: lr must be > 0");

  const det::ModelConfig& cfg = model.config;
  std::vector<NetSample> net;
  net.reserve(dataset.size());
  for (const TrainSample& s : dataset) net.push_back(preprocess(s, cfg));

  const std::vector<nn::Parameter<float>*> params = model.graph.parameters();
  nn::Rng rng(hp.seed);

  std::vector<size_t> order(net.size());
  std::iota(order.begin(), order.end(), size_t{0});

  std::vector<EpochStats> log;
  log.reserve(static_cast<size_t>(hp.epochs));
  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    // per epoch, not once: an on_epoch callback may have run eval-mode inference
    model.graph.set_mode(nn::Graph<float>::Mode::Train);
    double lr_epoch = hp.lr;
    if (hp.lr_schedule == LrSchedule::Cosine) {
      lr_epoch *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch - 1) /
                                        static_cast<double>(hp.epochs)));
    }
    // Fisher-Yates shuffle driven by the run seed
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = rng.uniform_index(i);
      std::swap(order[i - 1], order[j]);
    }

    EpochStats es;
    es.epoch = epoch;
    for (size_t first = 0; first < order.size(); first += static_cast<size_t>(hp.batch_size)) {
      const size_t count =
          std::min(static_cast<size_t>(hp.batch_size), order.size() - first);

      nn::Tensor<float> x_ir, x_th;
      if (cfg.mode != det::Mode::SingleThermal) x_ir = stack_batch(net, order, first, count, false);
      if (cfg.mode != det::Mode::SingleIr) x_th = stack_batch(net, order, first, count, true);
      std::vector<std::vector<det::GroundTruthBox>> batch_gt(count);
      for (size_t i = 0; i < count; ++i) batch_gt[i] = net[order[first + i]].boxes;

      switch (cfg.mode) {
        case det::Mode::Fusion:
          det::forward_model(model, &x_ir, &x_th);
          break;
        case det::Mode::SingleIr:
          det::forward_model<float>(model, &x_ir, nullptr);
          break;
        case det::Mode::SingleThermal:
          det::forward_model<float>(model, nullptr, &x_th);
          break;
      }

      nn::Tensor<float> g16, g32;
      const det::LossValues lv =
          det::detection_loss(model.graph.nodes[model.head16].out,
                              model.graph.nodes[model.head32].out, batch_gt, cfg, &g16, &g32);

      model.graph.zero_grad();
      model.graph.backward({{model.head16, &g16}, {model.head32, &g32}});
      nn::adam_step(params, static_cast<float>(lr_epoch), static_cast<float>(hp.beta1),
                    static_cast<float>(hp.beta2));

      const double w = static_cast<double>(count);
      es.loss_total += lv.total * w;
      es.loss_loc += lv.loc * w;
      es.loss_obj += lv.obj * w;
      es.loss_cls += lv.cls * w;
    }
    const double n = static_cast<double>(net.size());
    es.loss_total /= n;
    es.loss_loc /= n;
    es.loss_obj /= n;
    es.loss_cls /= n;
    log.push_back(es);
    if (on_epoch) on_epoch(es);
  }
  return log;
}

void fit_anchors(det::ModelConfig& cfg, const std::vector<TrainSample>& samples) {
  std::vector<std::array<double, 2>> sizes;
  for (const TrainSample& s : samples) {
    if (s.ir.width <= 0 || s.ir.height <= 0) continue;
    const det::Letterbox lb = det::letterbox_params(s.ir.width, s.ir.height, cfg.input_size);
    for (const det::GroundTruthBox& b : s.boxes) sizes.push_back({b.w * lb.scale, b.h * lb.scale});
  }
  constexpr size_t k = 6;
  if (sizes.size() < k) {
    throw std::invalid_argument("fit_anchors: need at least 6 labeled boxes, have " +
                                std::to_string(sizes.size()));
  }

  const auto by_area = [](const std::array<double, 2>& a, const std::array<double, 2>& b) {
    return a[0] * a[1] < b[0] * b[1];
  };
  // k-means under 1 - shape IoU; quantile seeding keeps the fit deterministic
  std::vector<std::array<double, 2>> sorted = sizes;
  std::sort(sorted.begin(), sorted.end(), by_area);
  std::array<std::array<double, 2>, k> centers;
  for (size_t c = 0; c < k; ++c) centers[c] = sorted[sorted.size() * (2 * c + 1) / (2 * k)];

  const auto shape_iou = [](const std::array<double, 2>& a, const std::array<double, 2>& b) {
    const double inter = std::min(a[0], b[0]) * std::min(a[1], b[1]);
    return inter / (a[0] * a[1] + b[0] * b[1] - inter);
  };
  std::vector<size_t> assign(sizes.size(), k);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (size_t i = 0; i < sizes.size(); ++i) {
      size_t best = 0;
      double best_iou = -1.0;
      for (size_t c = 0; c < k; ++c) {
        const double iou = shape_iou(sizes[i], centers[c]);
        if (iou > best_iou) {
          best_iou = iou;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::array<std::array<double, 2>, k> sums{};
    std::array<size_t, k> counts{};
    for (size_t i = 0; i < sizes.size(); ++i) {
      sums[assign[i]][0] += sizes[i][0];
      sums[assign[i]][1] += sizes[i][1];
      ++counts[assign[i]];
    }
    for (size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) centers[c] = {sums[c][0] / counts[c], sums[c][1] / counts[c]};
    }
  }

  std::sort(centers.begin(), centers.end(), by_area);
  for (int sc = 0; sc < 2; ++sc) {
    for (int a = 0; a < 3; ++a) {
      cfg.anchors[sc][a][0] = centers[static_cast<size_t>(sc) * 3 + a][0];
      cfg.anchors[sc][a][1] = centers[static_cast<size_t>(sc) * 3 + a][1];
    }
  }
}

void write_loss_csv(const std::string& path, const std::vector<EpochStats>& log) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_loss_csv: cannot write " + path);
  std::fputs("epoch,loss_total,loss_loc,loss_obj,loss_cls\n", f);
  for (const EpochStats& e : log) {
    std::fprintf(f, "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.loss_total, e.loss_loc, e.loss_obj,
                 e.loss_cls);
  }
  std::fclose(f);
}

std::vector<TrainSample> load_split(const std::string& root, const std::string& split) {
  if (split != "train" && split != "val" && split != "test" && split != "all") {
    throw std::invalid_argument("load_split: split must be train, val, test, or all");
  }
  namespace fs = std::filesystem;
  const fs::path manifest_path = fs::path(root) / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf.good()) {
    throw std::runtime_error("load_split: cannot read " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_split: invalid manifest " + manifest_path.string() + ": " +
                             e.what());
  }

  std::vector<TrainSample> out;
  for (const auto& jf : manifest.at("frames")) {
    if (split != "all" && jf.at("split").get<std::string>() != split) continue;
    const std::string stem = jf.at("stem").get<std::string>();
    TrainSample s;
    s.ir = img::load_png((fs::path(root) / "ir" / (stem + ".png")).string());
    s.thermal = img::load_png((fs::path(root) / "thermal" / (stem + ".png")).string());
    s.boxes = align::load_labels((fs::path(root) / "labels" / (stem + ".txt")).string(),
                                 s.ir.width, s.ir.height);
    out.push_back(std::move(s));
  }
  return out;
}

SplitDetections detect_split(det::DetectorModel<float>& model,
                             const std::vector<TrainSample>& samples, double conf_threshold,
                             double iou_threshold) {
  SplitDetections out;
  out.dets.reserve(samples.size());
  out.gts.reserve(samples.size());
  for (const TrainSample& s : samples) {
    const img::GrayImage* ir = model.config.mode != det::Mode::SingleThermal ? &s.ir : nullptr;
    const img::GrayImage* th = model.config.mode != det::Mode::SingleIr ? &s.thermal : nullptr;
    out.dets.push_back(det::infer_pair(model, ir, th, conf_threshold, iou_threshold));
    out.gts.push_back(s.boxes);
  }
  return out;
}

}  // namespace irfusion::train
