#include "irfusion/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "irfusion/weights_io.hpp"
#include "json.hpp"

namespace irfusion::det {

ModelConfig make_config(int input_size, double alpha, Mode mode) {
  ModelConfig cfg;
  const double s = static_cast<double>(input_size) / cfg.input_size;
  cfg.input_size = input_size;
  cfg.alpha = alpha;
  cfg.mode = mode;
  for (int scale = 0; scale < 2; ++scale)
    for (int a = 0; a < 3; ++a)
      for (int d = 0; d < 2; ++d) cfg.anchors[scale][a][d] *= s;
  validate_config(cfg);
  return cfg;
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.input_size <= 0 || cfg.input_size % 32 != 0) {
    throw std::invalid_argument("config: input_size must be a positive multiple of 32, got " +
                                std::to_string(cfg.input_size));
  }
  if (!(cfg.alpha > 0.0) || cfg.alpha > 1.0) {
    throw std::invalid_argument("config: width multiplier must be in (0, 1], got " +
                                std::to_string(cfg.alpha));
  }
  if (cfg.num_classes < 1) {
    throw std::invalid_argument("config: num_classes must be >= 1");
  }
  for (int scale = 0; scale < 2; ++scale)
    for (int a = 0; a < 3; ++a)
      for (int d = 0; d < 2; ++d)
        if (!(cfg.anchors[scale][a][d] > 0.0)) {
          throw std::invalid_argument("config: anchors must be positive");
        }
  if (cfg.ignore_iou_threshold < 0.0 || cfg.ignore_iou_threshold > 1.0) {
    throw std::invalid_argument("config: ignore_iou_threshold must be in [0, 1]");
  }
}

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Fusion: return "fusion";
    case Mode::SingleIr: return "single_ir";
    case Mode::SingleThermal: return "single_thermal";
  }
  return "fusion";
}

Mode mode_from_name(const std::string& name) {
  if (name == "fusion") return Mode::Fusion;
  if (name == "single_ir") return Mode::SingleIr;
  if (name == "single_thermal") return Mode::SingleThermal;
  throw std::invalid_argument("unknown detector mode: " + name);
}

// ---------------------------------------------------------------------------
// assignment

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  const double uni = w1 * h1 + w2 * h2 - inter;
  return inter / uni;
}

TargetSet assign_targets(const std::vector<GroundTruthBox>& gts, const ModelConfig& cfg) {
  const double s = cfg.input_size;
  for (size_t i = 0; i < gts.size(); ++i) {
    const GroundTruthBox& b = gts[i];
    if (!(b.w > 0.0) || !(b.h > 0.0) || b.cx < 0.0 || b.cx > s || b.cy < 0.0 || b.cy > s) {
      throw std::invalid_argument("ground-truth box " + std::to_string(i) +
                                  " outside the input frame or degenerate");
    }
    if (b.class_id < 0 || b.class_id >= cfg.num_classes) {
      throw std::invalid_argument("ground-truth box " + std::to_string(i) +
                                  " has class " + std::to_string(b.class_id));
    }
  }

  // Later boxes overwrite earlier ones when they land on the same slot.
  std::map<std::array<int, 4>, Assignment> pos_map;
  std::vector<std::array<int, 4>> ignores;

  for (const GroundTruthBox& gt : gts) {
    int best_scale = 0, best_anchor = 0;
    double best_q = -1.0;
    for (int scale = 0; scale < 2; ++scale) {
      for (int a = 0; a < 3; ++a) {
        const double q =
            shape_iou(gt.w, gt.h, cfg.anchors[scale][a][0], cfg.anchors[scale][a][1]);
        if (q > best_q) {  // strictly greater: ties keep the lowest index
          best_q = q;
          best_scale = scale;
          best_anchor = a;
        }
      }
    }

    const auto cell = [&](int scale, int& gx, int& gy) {
      const int g = cfg.grid(scale);
      gx = std::min(g - 1, static_cast<int>(gt.cx / ModelConfig::stride(scale)));
      gy = std::min(g - 1, static_cast<int>(gt.cy / ModelConfig::stride(scale)));
    };

    int bgx = 0, bgy = 0;
    cell(best_scale, bgx, bgy);
    Assignment as;
    as.scale = best_scale;
    as.anchor = best_anchor;
    as.gx = bgx;
    as.gy = bgy;
    as.box = gt;
    pos_map[{best_scale, best_anchor, bgy, bgx}] = as;

    for (int scale = 0; scale < 2; ++scale) {
      int gx = 0, gy = 0;
      cell(scale, gx, gy);
      for (int a = 0; a < 3; ++a) {
        if (scale == best_scale && a == best_anchor) continue;
        const double q =
            shape_iou(gt.w, gt.h, cfg.anchors[scale][a][0], cfg.anchors[scale][a][1]);
        if (q > cfg.ignore_iou_threshold) ignores.push_back({scale, a, gy, gx});
      }
    }
  }

  TargetSet ts;
  for (const auto& [key, as] : pos_map) ts.positives.push_back(as);
  ts.ignores = std::move(ignores);
  return ts;
}

// ---------------------------------------------------------------------------
// box terms

BoxTermGrad iou_grad(double cx, double cy, double w, double h, double gcx, double gcy, double gw,
                     double gh) {
  const double ax0 = cx - w / 2, ax1 = cx + w / 2, ay0 = cy - h / 2, ay1 = cy + h / 2;
  const double bx0 = gcx - gw / 2, bx1 = gcx + gw / 2, by0 = gcy - gh / 2, by1 = gcy + gh / 2;

  const double iw = std::min(ax1, bx1) - std::max(ax0, bx0);
  const double ih = std::min(ay1, by1) - std::max(ay0, by0);
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;
  const double uni = w * h + gw * gh - inter;

  // intersection derivatives with respect to the pred corners
  double di_dax0 = 0, di_dax1 = 0, di_day0 = 0, di_day1 = 0;
  if (overlap) {
    if (ax0 > bx0) di_dax0 = -ih;
    if (ax1 < bx1) di_dax1 = ih;
    if (ay0 > by0) di_day0 = -iw;
    if (ay1 < by1) di_day1 = iw;
  }
  const double di_dcx = di_dax0 + di_dax1;
  const double di_dcy = di_day0 + di_day1;
  const double di_dw = 0.5 * (di_dax1 - di_dax0);
  const double di_dh = 0.5 * (di_day1 - di_day0);

  const double du_dcx = -di_dcx, du_dcy = -di_dcy;
  const double du_dw = h - di_dw, du_dh = w - di_dh;

  BoxTermGrad g;
  g.value = inter / uni;
  const double u2 = uni * uni;
  g.dcx = (di_dcx * uni - inter * du_dcx) / u2;
  g.dcy = (di_dcy * uni - inter * du_dcy) / u2;
  g.dw = (di_dw * uni - inter * du_dw) / u2;
  g.dh = (di_dh * uni - inter * du_dh) / u2;
  return g;
}

BoxTermGrad ciou_grad(double cx, double cy, double w, double h, double gcx, double gcy,
                      double gw, double gh) {
  BoxTermGrad out = iou_grad(cx, cy, w, h, gcx, gcy, gw, gh);
  const double iou = out.value;

  const double ax0 = cx - w / 2, ax1 = cx + w / 2, ay0 = cy - h / 2, ay1 = cy + h / 2;
  const double bx0 = gcx - gw / 2, bx1 = gcx + gw / 2, by0 = gcy - gh / 2, by1 = gcy + gh / 2;

  // normalized center distance: rho^2 / c^2 over the enclosing box diagonal
  const double rho2 = (cx - gcx) * (cx - gcx) + (cy - gcy) * (cy - gcy);
  const double drho2_dcx = 2.0 * (cx - gcx);
  const double drho2_dcy = 2.0 * (cy - gcy);

  const double ex0a = ax0 < bx0 ? 1.0 : 0.0;  // enclosing corner owned by pred?
  const double ex1a = ax1 > bx1 ? 1.0 : 0.0;
  const double ey0a = ay0 < by0 ? 1.0 : 0.0;
  const double ey1a = ay1 > by1 ? 1.0 : 0.0;
  const double cw = std::max(ax1, bx1) - std::min(ax0, bx0);
  const double ch = std::max(ay1, by1) - std::min(ay0, by0);
  const double c2 = std::max(cw * cw + ch * ch, 1e-12);
  const double dc2_dcx = 2.0 * cw * (ex1a - ex0a);
  const double dc2_dcy = 2.0 * ch * (ey1a - ey0a);
  const double dc2_dw = 2.0 * cw * 0.5 * (ex1a + ex0a);
  const double dc2_dh = 2.0 * ch * 0.5 * (ey1a + ey0a);

  // aspect-ratio term, with the trade-off coefficient differentiated too so
  // the analytic gradient is the true gradient of the returned value
  const double kAspect = 4.0 / (M_PI * M_PI);
  const double ta = std::atan2(w, h);
  const double tb = std::atan2(gw, gh);
  const double v = kAspect * (tb - ta) * (tb - ta);
  const double dta_dw = h / (w * w + h * h);
  const double dta_dh = -w / (w * w + h * h);
  const double dv_dw = -2.0 * kAspect * (tb - ta) * dta_dw;
  const double dv_dh = -2.0 * kAspect * (tb - ta) * dta_dh;

  const double denom = std::max(1.0 - iou + v, 1e-12);
  const double alpha = v / denom;
  const auto dalpha = [&](double div, double diou) {
    return (div * (1.0 - iou) + v * diou) / (denom * denom);
  };

  BoxTermGrad g;
  g.value = iou - rho2 / c2 - alpha * v;
  const double c4 = c2 * c2;
  g.dcx = out.dcx - (drho2_dcx * c2 - rho2 * dc2_dcx) / c4 - (dalpha(0.0, out.dcx) * v);
  g.dcy = out.dcy - (drho2_dcy * c2 - rho2 * dc2_dcy) / c4 - (dalpha(0.0, out.dcy) * v);
  g.dw = out.dw - (-rho2 * dc2_dw) / c4 - (dalpha(dv_dw, out.dw) * v + alpha * dv_dw);
  g.dh = out.dh - (-rho2 * dc2_dh) / c4 - (dalpha(dv_dh, out.dh) * v + alpha * dv_dh);
  return g;
}

// ---------------------------------------------------------------------------
// encode

EncodedBox encode_box(const GroundTruthBox& box, int scale, int anchor, int gx, int gy,
                      const ModelConfig& cfg) {
  const double stride = ModelConfig::stride(scale);
  const double ux = box.cx / stride - gx;
  const double uy = box.cy / stride - gy;
  if (ux <= 0.0 || ux >= 1.0 || uy <= 0.0 || uy >= 1.0) {
    throw std::invalid_argument("encode: box center not strictly inside cell (" +
                                std::to_string(gx) + ", " + std::to_string(gy) + ")");
  }
  EncodedBox e;
  e.tx = std::log(ux / (1.0 - ux));
  e.ty = std::log(uy / (1.0 - uy));
  e.tw = std::log(box.w / cfg.anchors[scale][anchor][0]);
  e.th = std::log(box.h / cfg.anchors[scale][anchor][1]);
  return e;
}

// ---------------------------------------------------------------------------
// non-max suppression

std::vector<Detection> nms(std::vector<Detection> dets, double conf_threshold,
                           double iou_threshold) {
  dets.erase(std::remove_if(dets.begin(), dets.end(),
                            [&](const Detection& d) { return !(d.score > conf_threshold); }),
             dets.end());
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.cx != b.cx) return a.cx < b.cx;
    return a.cy < b.cy;
  });
  std::vector<Detection> kept;
  std::vector<bool> gone(dets.size(), false);
  for (size_t i = 0; i < dets.size(); ++i) {
    if (gone[i]) continue;
    kept.push_back(dets[i]);
    for (size_t j = i + 1; j < dets.size(); ++j) {
      if (gone[j] || dets[j].class_id != dets[i].class_id) continue;
      if (box_iou(dets[i], dets[j]) > iou_threshold) gone[j] = true;
    }
  }
  return kept;
}

// ---------------------------------------------------------------------------
// letterboxing and inference

Letterbox letterbox_params(int src_w, int src_h, int dst_size) {
  if (src_w < 1 || src_h < 1 || dst_size < 1) {
    throw std::invalid_argument("letterbox: non-positive dimensions");
  }
  Letterbox lb;
  lb.scale = std::min(static_cast<double>(dst_size) / src_w,
                      static_cast<double>(dst_size) / src_h);
  lb.pad_x = (dst_size - src_w * lb.scale) / 2.0;
  lb.pad_y = (dst_size - src_h * lb.scale) / 2.0;
  return lb;
}

img::GrayImage letterbox_image(const img::GrayImage& src, int dst_size, const Letterbox& lb) {
  img::GrayImage out(dst_size, dst_size, 0.5f);
  for (int v = 0; v < dst_size; ++v) {
    for (int u = 0; u < dst_size; ++u) {
      double sx = 0.0, sy = 0.0;
      letterbox_invert(lb, u, v, sx, sy);
      if (sx >= -0.5 && sx <= src.width - 0.5 && sy >= -0.5 && sy <= src.height - 0.5) {
        out.at(u, v) = img::bilinear_sample(src, sx, sy, 0.5f);
      }
    }
  }
  return out;
}

std::vector<Detection> infer_pair(DetectorModel<float>& model, const img::GrayImage* ir,
                                  const img::GrayImage* thermal, double conf_threshold,
                                  double iou_threshold) {
  const img::GrayImage* ref = ir ? ir : thermal;
  if (!ref) throw std::invalid_argument("infer: no input images");
  if (ir && thermal && (ir->width != thermal->width || ir->height != thermal->height)) {
    throw std::invalid_argument("infer: pair dimensions differ (" + std::to_string(ir->width) +
                                "x" + std::to_string(ir->height) + " vs " +
                                std::to_string(thermal->width) + "x" +
                                std::to_string(thermal->height) + ")");
  }

  const Letterbox lb = letterbox_params(ref->width, ref->height, model.config.input_size);
  nn::Tensor<float> ir_t, th_t;
  if (ir) ir_t = image_to_tensor<float>(letterbox_image(*ir, model.config.input_size, lb));
  if (thermal) th_t = image_to_tensor<float>(letterbox_image(*thermal, model.config.input_size, lb));

  model.graph.set_mode(nn::Graph<float>::Mode::Eval);
  forward_model(model, ir ? &ir_t : nullptr, thermal ? &th_t : nullptr);
  auto decoded = decode_predictions(model.graph.output(model.head16),
                                    model.graph.output(model.head32), model.config);
  std::vector<Detection> dets = nms(std::move(decoded[0]), conf_threshold, iou_threshold);
  for (Detection& d : dets) {
    double x = 0.0, y = 0.0;
    letterbox_invert(lb, d.cx, d.cy, x, y);
    d.cx = x;
    d.cy = y;
    d.w /= lb.scale;
    d.h /= lb.scale;
  }
  return dets;
}

img::GrayImage draw_detections(const img::GrayImage& im, const std::vector<Detection>& dets) {
  img::GrayImage out = im;
  const auto put = [&](int x, int y) {
    if (x >= 0 && x < out.width && y >= 0 && y < out.height) out.at(x, y) = 1.0f;
  };
  for (const Detection& d : dets) {
    const int x0 = static_cast<int>(std::lround(d.cx - d.w / 2));
    const int x1 = static_cast<int>(std::lround(d.cx + d.w / 2));
    const int y0 = static_cast<int>(std::lround(d.cy - d.h / 2));
    const int y1 = static_cast<int>(std::lround(d.cy + d.h / 2));
    for (int x = x0; x <= x1; ++x) {
      put(x, y0);
      put(x, y1);
    }
    for (int y = y0; y <= y1; ++y) {
      put(x0, y);
      put(x1, y);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// persistence

void save_model(const std::string& path, const DetectorModel<float>& model) {
  nn::save_weights(path, model.graph);
  nlohmann::ordered_json j;
  const ModelConfig& c = model.config;
  j["input_size"] = c.input_size;
  j["alpha"] = c.alpha;
  j["num_classes"] = c.num_classes;
  j["mode"] = mode_name(c.mode);
  j["activation"] = c.activation == ActKind::Mish ? "mish" : "leaky_relu";
  nlohmann::ordered_json anchors = nlohmann::ordered_json::array();
  for (int scale = 0; scale < 2; ++scale) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (int a = 0; a < 3; ++a) {
      arr.push_back(
          nlohmann::ordered_json::array({c.anchors[scale][a][0], c.anchors[scale][a][1]}));
    }
    anchors.push_back(arr);
  }
  j["anchors"] = anchors;
  j["lambda_loc"] = c.lambda_loc;
  j["lambda_obj"] = c.lambda_obj;
  j["lambda_cls"] = c.lambda_cls;
  j["ignore_iou_threshold"] = c.ignore_iou_threshold;
  j["plain_iou_loss"] = c.plain_iou_loss;
  std::ofstream os(path + ".json");
  if (!os) throw std::runtime_error("cannot open " + path + ".json for writing");
  os << j.dump(2) << "\n";
}

DetectorModel<float> load_model(const std::string& path) {
  std::ifstream is(path + ".json");
  if (!is) throw std::runtime_error("cannot open model sidecar " + path + ".json");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed model sidecar " + path + ".json: " + e.what());
  }
  ModelConfig c;
  try {
    c.input_size = j.at("input_size").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.num_classes = j.at("num_classes").get<int>();
    c.mode = mode_from_name(j.at("mode").get<std::string>());
    c.activation =
        j.at("activation").get<std::string>() == "mish" ? ActKind::Mish : ActKind::LeakyRelu;
    for (int scale = 0; scale < 2; ++scale)
      for (int a = 0; a < 3; ++a)
        for (int d = 0; d < 2; ++d) c.anchors[scale][a][d] = j.at("anchors")[scale][a][d];
    c.lambda_loc = j.at("lambda_loc").get<double>();
    c.lambda_obj = j.at("lambda_obj").get<double>();
    c.lambda_cls = j.at("lambda_cls").get<double>();
    c.ignore_iou_threshold = j.at("ignore_iou_threshold").get<double>();
    c.plain_iou_loss = j.at("plain_iou_loss").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("model sidecar " + path + ".json missing fields: " + e.what());
  }
  DetectorModel<float> m = build_model<float>(c);
  nn::load_weights(path, m.graph);
  return m;
}

}  // namespace irfusion::det
