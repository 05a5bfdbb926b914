#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "irfusion/boxes.hpp"
#include "irfusion/image.hpp"
#include "irfusion/nn/graph.hpp"

namespace irfusion::det {

enum class Mode { Fusion, SingleIr, SingleThermal };
enum class ActKind { Mish, LeakyRelu };

// Anchors are in pixels for the configured input_size; the defaults below are
// the standard tiny-detector set for 416 and are scaled by make_config.
struct ModelConfig {
  int input_size = 416;
  double alpha = 1.0;
  int num_classes = 1;
  double anchors[2][3][2] = {{{10, 14}, {23, 27}, {37, 58}},
                             {{81, 82}, {135, 169}, {344, 319}}};
  Mode mode = Mode::Fusion;
  ActKind activation = ActKind::Mish;
  double lambda_loc = 1.0;
  double lambda_obj = 1.0;
  double lambda_cls = 0.5;
  double ignore_iou_threshold = 0.5;
  bool plain_iou_loss = false;  // swap CIoU for plain IoU in the loc term

  int grid(int scale) const { return input_size / stride(scale); }
  static int stride(int scale) { return scale == 0 ? 16 : 32; }
  int head_channels() const { return 3 * (5 + num_classes); }
};

// input_size must be a positive multiple of 32; anchors scale linearly.
ModelConfig make_config(int input_size, double alpha, Mode mode);
void validate_config(const ModelConfig& cfg);

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& name);

// ---------------------------------------------------------------------------
// model

template <typename T>
struct DetectorModel {
  ModelConfig config;
  nn::Graph<T> graph;
  int in_ir = -1, in_thermal = -1;  // graph input ids; -1 when the mode lacks one
  int head16 = -1, head32 = -1;     // stride-16 and stride-32 output node ids
};

namespace detail {

// ceil(base * alpha), bumped to the next even number so CSP splits stay legal.
inline int scaled_channels(int base, double alpha) {
  int c = static_cast<int>(std::ceil(base * alpha));
  if (c < 2) c = 2;
  if (c % 2 != 0) ++c;
  return c;
}

template <typename T>
int conv_bn_act(nn::Graph<T>& g, int x, int cout, int k, int stride, int pad, nn::Act act) {
  const int c = g.conv(x, cout, k, stride, pad, false);
  const int b = g.batchnorm(c);
  return g.activation(b, act);
}

// One CSP stage on C input channels: the second channel half runs two 3x3
// convs, rejoins, is mixed by a 1x1, concats with the stage input, and the
// doubled-width result is max-pooled down a stride. Output: 2C channels.
template <typename T>
int csp_stage(nn::Graph<T>& g, int x, nn::Act act) {
  const int c = g.channels(x);
  const int half = g.split_half(x, 1);
  const int c1 = conv_bn_act(g, half, c / 2, 3, 1, 1, act);
  const int c2 = conv_bn_act(g, c1, c / 2, 3, 1, 1, act);
  const int inner = g.concat(c2, c1);
  const int mixed = conv_bn_act(g, inner, c, 1, 1, 0, act);
  const int outer = g.concat(x, mixed);
  return g.maxpool(outer, 2, 2);
}

// Stem + three CSP stages for one modality stream; returns (p4 raw, p5 raw):
// stride 16 with 4*c64 channels and stride 32 with 8*c64 channels.
template <typename T>
std::pair<int, int> backbone_stream(nn::Graph<T>& g, int input, double alpha, nn::Act act) {
  const int c32 = scaled_channels(32, alpha);
  const int c64 = scaled_channels(64, alpha);
  const int s1 = conv_bn_act(g, input, c32, 3, 2, 1, act);
  const int s2 = conv_bn_act(g, s1, c64, 3, 2, 1, act);
  const int st1 = csp_stage(g, s2, act);   // 2*c64 @ stride 8
  const int st2 = csp_stage(g, st1, act);  // 4*c64 @ stride 16
  const int st3 = csp_stage(g, st2, act);  // 8*c64 @ stride 32
  return {st2, st3};
}

}  // namespace detail

template <typename T>
DetectorModel<T> build_model(const ModelConfig& cfg) {
  validate_config(cfg);
  DetectorModel<T> m;
  m.config = cfg;
  nn::Graph<T>& g = m.graph;
  const nn::Act act = cfg.activation == ActKind::Mish ? nn::Act::Mish : nn::Act::LeakyRelu;
  const int c128 = detail::scaled_channels(128, cfg.alpha);
  const int c256 = detail::scaled_channels(256, cfg.alpha);
  const int c512 = detail::scaled_channels(512, cfg.alpha);

  int p4 = -1, p5 = -1;
  if (cfg.mode == Mode::Fusion) {
    m.in_ir = g.add_input(1);
    m.in_thermal = g.add_input(1);
    const auto [ir_p4, ir_p5] = detail::backbone_stream(g, m.in_ir, cfg.alpha, act);
    const auto [th_p4, th_p5] = detail::backbone_stream(g, m.in_thermal, cfg.alpha, act);
    // fuse per scale: channel concat, then 1x1 back to single-stream width
    p4 = detail::conv_bn_act(g, g.concat(ir_p4, th_p4), c256, 1, 1, 0, act);
    p5 = detail::conv_bn_act(g, g.concat(ir_p5, th_p5), c512, 1, 1, 0, act);
  } else {
    const int input = g.add_input(1);
    if (cfg.mode == Mode::SingleIr) {
      m.in_ir = input;
    } else {
      m.in_thermal = input;
    }
    const auto [s_p4, s_p5] = detail::backbone_stream(g, input, cfg.alpha, act);
    p4 = s_p4;
    p5 = s_p5;
  }

  // deepest backbone conv, after the fusion point so both modes share widths
  p5 = detail::conv_bn_act(g, p5, c512, 3, 1, 1, act);

  // tiny FPN neck and the two heads
  const int r5 = detail::conv_bn_act(g, p5, c256, 1, 1, 0, act);
  const int h5 = detail::conv_bn_act(g, r5, c512, 3, 1, 1, act);
  m.head32 = g.conv(h5, cfg.head_channels(), 1, 1, 0, true);

  const int r4 = detail::conv_bn_act(g, r5, c128, 1, 1, 0, act);
  const int up = g.upsample(r4, 2);
  const int cat4 = g.concat(up, p4);
  const int h4 = detail::conv_bn_act(g, cat4, c256, 3, 1, 1, act);
  m.head16 = g.conv(h4, cfg.head_channels(), 1, 1, 0, true);
  return m;
}

template <typename T>
void forward_model(DetectorModel<T>& m, const nn::Tensor<T>* ir, const nn::Tensor<T>* thermal) {
  const auto check = [&](const nn::Tensor<T>* t, const char* name) {
    if (!t) throw std::invalid_argument(std::string("forward: missing ") + name + " input");
    if (t->c != 1 || t->h != m.config.input_size || t->w != m.config.input_size) {
      throw std::invalid_argument(std::string("forward: ") + name + " input " + t->shape_str() +
                                  " does not match Nx1x" + std::to_string(m.config.input_size) +
                                  "x" + std::to_string(m.config.input_size));
    }
  };
  switch (m.config.mode) {
    case Mode::Fusion:
      check(ir, "ir");
      check(thermal, "thermal");
      if (ir->n != thermal->n) {
        throw std::invalid_argument("forward: ir batch " + std::to_string(ir->n) +
                                    " != thermal batch " + std::to_string(thermal->n));
      }
      m.graph.forward({ir, thermal});
      break;
    case Mode::SingleIr:
      check(ir, "ir");
      if (thermal) throw std::invalid_argument("forward: single_ir mode takes no thermal input");
      m.graph.forward({ir});
      break;
    case Mode::SingleThermal:
      check(thermal, "thermal");
      if (ir) throw std::invalid_argument("forward: single_thermal mode takes no ir input");
      m.graph.forward({thermal});
      break;
  }
}

// ---------------------------------------------------------------------------
// target assignment

struct Assignment {
  int scale = 0;   // 0 = stride-16 head, 1 = stride-32 head
  int anchor = 0;  // index within the scale
  int gx = 0, gy = 0;
  GroundTruthBox box;
};

struct TargetSet {
  // unique per (scale, anchor, cell); when ground-truth boxes collide on a
  // slot the later box in input order wins
  std::vector<Assignment> positives;
  // (scale, anchor, gy, gx) slots excluded from the objectness loss
  std::vector<std::array<int, 4>> ignores;
};

// Width/height IoU of two boxes placed at a common center.
double shape_iou(double w1, double h1, double w2, double h2);

TargetSet assign_targets(const std::vector<GroundTruthBox>& gts, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// box regression terms (value + derivative with respect to the first box)

struct BoxTermGrad {
  double value = 0.0;
  double dcx = 0.0, dcy = 0.0, dw = 0.0, dh = 0.0;
};

// Complete-IoU: IoU minus the normalized center distance and aspect terms,
// differentiated in full (including the aspect trade-off coefficient) so the
// analytic gradient matches finite differences of the implemented value.
BoxTermGrad ciou_grad(double cx, double cy, double w, double h, double gcx, double gcy,
                      double gw, double gh);
BoxTermGrad iou_grad(double cx, double cy, double w, double h, double gcx, double gcy, double gw,
                     double gh);

inline double ciou(double cx, double cy, double w, double h, double gcx, double gcy, double gw,
                   double gh) {
  return ciou_grad(cx, cy, w, h, gcx, gcy, gw, gh).value;
}

// ---------------------------------------------------------------------------
// decode / encode / loss

// Logit layout per head tensor: channel a*(5+num_classes)+f with
// f = 0..3 box logits (tx, ty, tw, th), 4 objectness, 5.. class logits.
template <typename T>
std::vector<std::vector<Detection>> decode_predictions(const nn::Tensor<T>& head16,
                                                       const nn::Tensor<T>& head32,
                                                       const ModelConfig& cfg) {
  const int nc = cfg.num_classes;
  const int per = 5 + nc;
  std::vector<std::vector<Detection>> out(head16.n);
  const nn::Tensor<T>* heads[2] = {&head16, &head32};
  for (int scale = 0; scale < 2; ++scale) {
    const nn::Tensor<T>& hd = *heads[scale];
    const int g = cfg.grid(scale);
    const double stride = ModelConfig::stride(scale);
    if (hd.c != cfg.head_channels() || hd.h != g || hd.w != g) {
      throw std::invalid_argument("decode: head " + std::to_string(scale) + " shape " +
                                  hd.shape_str() + " does not match config");
    }
    for (int n = 0; n < hd.n; ++n) {
      for (int a = 0; a < 3; ++a) {
        for (int gy = 0; gy < g; ++gy) {
          for (int gx = 0; gx < g; ++gx) {
            Detection d;
            const double tx = hd.at(n, a * per + 0, gy, gx);
            const double ty = hd.at(n, a * per + 1, gy, gx);
            const double tw = hd.at(n, a * per + 2, gy, gx);
            const double th = hd.at(n, a * per + 3, gy, gx);
            d.cx = (nn::sigmoid_stable(tx) + gx) * stride;
            d.cy = (nn::sigmoid_stable(ty) + gy) * stride;
            d.w = cfg.anchors[scale][a][0] * std::exp(tw);
            d.h = cfg.anchors[scale][a][1] * std::exp(th);
            d.objectness = nn::sigmoid_stable(static_cast<double>(hd.at(n, a * per + 4, gy, gx)));
            d.class_probs.resize(nc);
            double best = 0.0;
            for (int k = 0; k < nc; ++k) {
              d.class_probs[k] =
                  nn::sigmoid_stable(static_cast<double>(hd.at(n, a * per + 5 + k, gy, gx)));
              if (d.class_probs[k] >= best) {
                best = d.class_probs[k];
                d.class_id = k;
              }
            }
            d.score = d.objectness * best;
            out[n].push_back(d);
          }
        }
      }
    }
  }
  return out;
}

// Algebraic inverse of the decode mapping for a box sitting in (scale,
// anchor, gx, gy); the fractional cell offsets must lie strictly inside (0,1).
struct EncodedBox {
  double tx, ty, tw, th;
};
EncodedBox encode_box(const GroundTruthBox& box, int scale, int anchor, int gx, int gy,
                      const ModelConfig& cfg);

struct LossValues {
  double total = 0.0, loc = 0.0, obj = 0.0, cls = 0.0;
};

namespace detail {

inline double bce_with_logit(double t, double y) {
  // max(t,0) - t*y + log(1 + exp(-|t|)) is the numerically stable form
  return std::max(t, 0.0) - t * y + std::log1p(std::exp(-std::abs(t)));
}

}  // namespace detail

// Three-term detection loss over a batch, normalized by batch size:
// loc sums (1 - CIoU) at positives, obj is BCE over all non-ignored anchors,
// cls is BCE at positives. When grad16/grad32 are given they receive
// d(total)/d(logit) for every head logit (analytic, matches the value).
template <typename T>
LossValues detection_loss(const nn::Tensor<T>& head16, const nn::Tensor<T>& head32,
                          const std::vector<std::vector<GroundTruthBox>>& batch_gt,
                          const ModelConfig& cfg, nn::Tensor<T>* grad16 = nullptr,
                          nn::Tensor<T>* grad32 = nullptr) {
  const int nc = cfg.num_classes;
  const int per = 5 + nc;
  const int batch = head16.n;
  if (static_cast<int>(batch_gt.size()) != batch) {
    throw std::invalid_argument("loss: batch size " + std::to_string(batch) + " but " +
                                std::to_string(batch_gt.size()) + " ground-truth lists");
  }
  if (grad16) *grad16 = nn::Tensor<T>(head16.n, head16.c, head16.h, head16.w);
  if (grad32) *grad32 = nn::Tensor<T>(head32.n, head32.c, head32.h, head32.w);

  const nn::Tensor<T>* heads[2] = {&head16, &head32};
  nn::Tensor<T>* grads[2] = {grad16, grad32};
  LossValues lv;

  for (int n = 0; n < batch; ++n) {
    const TargetSet ts = assign_targets(batch_gt[n], cfg);

    // slot keys: (scale, anchor, gy, gx) -> positive index; ignore flags
    std::map<std::array<int, 4>, size_t> positive_at;
    for (size_t i = 0; i < ts.positives.size(); ++i) {
      const Assignment& as = ts.positives[i];
      positive_at[{as.scale, as.anchor, as.gy, as.gx}] = i;
    }
    std::map<std::array<int, 4>, bool> ignored;
    for (const auto& ig : ts.ignores) ignored[ig] = true;

    for (int scale = 0; scale < 2; ++scale) {
      const nn::Tensor<T>& hd = *heads[scale];
      const int g = cfg.grid(scale);
      const double stride = ModelConfig::stride(scale);
      for (int a = 0; a < 3; ++a) {
        for (int gy = 0; gy < g; ++gy) {
          for (int gx = 0; gx < g; ++gx) {
            const std::array<int, 4> key = {scale, a, gy, gx};
            const auto pos = positive_at.find(key);
            const bool is_pos = pos != positive_at.end();
            const double tobj = hd.at(n, a * per + 4, gy, gx);

            if (is_pos || !ignored.count(key)) {
              const double y = is_pos ? 1.0 : 0.0;
              lv.obj += detail::bce_with_logit(tobj, y);
              if (grads[scale]) {
                grads[scale]->at(n, a * per + 4, gy, gx) += static_cast<T>(
                    cfg.lambda_obj / batch * (nn::sigmoid_stable(tobj) - y));
              }
            }
            if (!is_pos) continue;

            const GroundTruthBox& gt = ts.positives[pos->second].box;
            const double tx = hd.at(n, a * per + 0, gy, gx);
            const double ty = hd.at(n, a * per + 1, gy, gx);
            const double tw = hd.at(n, a * per + 2, gy, gx);
            const double th = hd.at(n, a * per + 3, gy, gx);
            const double sx = nn::sigmoid_stable(tx);
            const double sy = nn::sigmoid_stable(ty);
            const double bx = (sx + gx) * stride;
            const double by = (sy + gy) * stride;
            const double bw = cfg.anchors[scale][a][0] * std::exp(tw);
            const double bh = cfg.anchors[scale][a][1] * std::exp(th);

            const BoxTermGrad term = cfg.plain_iou_loss
                                         ? iou_grad(bx, by, bw, bh, gt.cx, gt.cy, gt.w, gt.h)
                                         : ciou_grad(bx, by, bw, bh, gt.cx, gt.cy, gt.w, gt.h);
            lv.loc += 1.0 - term.value;
            if (grads[scale]) {
              // chain rule from box coords back to the four logits
              const double gscale = cfg.lambda_loc / batch;
              grads[scale]->at(n, a * per + 0, gy, gx) +=
                  static_cast<T>(-gscale * term.dcx * sx * (1.0 - sx) * stride);
              grads[scale]->at(n, a * per + 1, gy, gx) +=
                  static_cast<T>(-gscale * term.dcy * sy * (1.0 - sy) * stride);
              grads[scale]->at(n, a * per + 2, gy, gx) += static_cast<T>(-gscale * term.dw * bw);
              grads[scale]->at(n, a * per + 3, gy, gx) += static_cast<T>(-gscale * term.dh * bh);
            }

            for (int k = 0; k < nc; ++k) {
              const double tc = hd.at(n, a * per + 5 + k, gy, gx);
              const double y = k == gt.class_id ? 1.0 : 0.0;
              lv.cls += detail::bce_with_logit(tc, y);
              if (grads[scale]) {
                grads[scale]->at(n, a * per + 5 + k, gy, gx) += static_cast<T>(
                    cfg.lambda_cls / batch * (nn::sigmoid_stable(tc) - y));
              }
            }
          }
        }
      }
    }
  }

  lv.loc /= batch;
  lv.obj /= batch;
  lv.cls /= batch;
  lv.total = cfg.lambda_loc * lv.loc + cfg.lambda_obj * lv.obj + cfg.lambda_cls * lv.cls;
  return lv;
}

// ---------------------------------------------------------------------------
// non-max suppression

// Drops detections below conf_threshold, then greedily keeps the best-scored
// box and suppresses same-class boxes overlapping it above iou_threshold.
// Ordering is fully determinized: score descending, then cx, then cy.
std::vector<Detection> nms(std::vector<Detection> dets, double conf_threshold = 0.25,
                           double iou_threshold = 0.45);

// ---------------------------------------------------------------------------
// letterboxing and whole-image inference

struct Letterbox {
  double scale = 1.0;
  double pad_x = 0.0, pad_y = 0.0;
};

Letterbox letterbox_params(int src_w, int src_h, int dst_size);
img::GrayImage letterbox_image(const img::GrayImage& src, int dst_size, const Letterbox& lb);

inline void letterbox_apply(const Letterbox& lb, double x, double y, double& nx, double& ny) {
  nx = x * lb.scale + lb.pad_x;
  ny = y * lb.scale + lb.pad_y;
}
inline void letterbox_invert(const Letterbox& lb, double nx, double ny, double& x, double& y) {
  x = (nx - lb.pad_x) / lb.scale;
  y = (ny - lb.pad_y) / lb.scale;
}

template <typename T>
nn::Tensor<T> image_to_tensor(const img::GrayImage& im) {
  nn::Tensor<T> t(1, 1, im.height, im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) t.at(0, 0, y, x) = static_cast<T>(im.at(x, y));
  return t;
}

// Aligned-pair inference: letterbox to the network frame, eval-mode forward,
// decode, NMS, and map the surviving boxes back to original-image pixels.
std::vector<Detection> infer_pair(DetectorModel<float>& model, const img::GrayImage* ir,
                                  const img::GrayImage* thermal, double conf_threshold = 0.25,
                                  double iou_threshold = 0.45);

// White 1-px rectangles for overlay PNGs.
img::GrayImage draw_detections(const img::GrayImage& im, const std::vector<Detection>& dets);

// ---------------------------------------------------------------------------
// model persistence: nn-core weights file + JSON config sidecar at <path>.json

void save_model(const std::string& path, const DetectorModel<float>& model);
DetectorModel<float> load_model(const std::string& path);

}  // namespace irfusion::det
