// Python bindings for the irfusion toolkit: calibration, homography
// estimation and warping, synthetic dataset generation, detector training,
// inference, and evaluation. Images cross the boundary as float32 numpy
// arrays of shape (height, width) in [0, 1].

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <array>
#include <string>
#include <vector>

#include "irfusion/alignment.hpp"
#include "irfusion/calibration.hpp"
#include "irfusion/detector.hpp"
#include "irfusion/geometry.hpp"
#include "irfusion/image.hpp"
#include "irfusion/metrics.hpp"
#include "irfusion/synthdata.hpp"
#include "irfusion/trainer.hpp"

namespace py = pybind11;
using namespace irfusion;

namespace {

img::GrayImage image_from_array(const py::array_t<float, py::array::c_style>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("image array must be 2-D (height, width)");
  img::GrayImage im(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  const auto r = a.unchecked<2>();
  for (py::ssize_t y = 0; y < a.shape(0); ++y) {
    for (py::ssize_t x = 0; x < a.shape(1); ++x) {
      im.at(static_cast<int>(x), static_cast<int>(y)) = r(y, x);
    }
  }
  return im;
}

py::array_t<float> array_from_image(const img::GrayImage& im) {
  py::array_t<float> a({im.height, im.width});
  auto w = a.mutable_unchecked<2>();
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) w(y, x) = im.at(x, y);
  }
  return a;
}

geom::Homography homography_from_seq(const std::array<double, 9>& h) {
  return geom::Homography{h};
}

py::dict calibration_dict(const calib::CalibrationResult& r) {
  py::dict d;
  d["fx"] = r.intrinsics.fx;
  d["fy"] = r.intrinsics.fy;
  d["cx"] = r.intrinsics.cx;
  d["cy"] = r.intrinsics.cy;
  d["k1"] = r.distortion.k1;
  d["k2"] = r.distortion.k2;
  d["k3"] = r.distortion.k3;
  d["p1"] = r.distortion.p1;
  d["p2"] = r.distortion.p2;
  d["rms"] = r.rms_reprojection;
  d["views"] = r.poses.size();
  return d;
}

py::list detections_list(const std::vector<det::Detection>& dets) {
  py::list out;
  for (const det::Detection& d : dets) {
    py::dict b;
    b["cx"] = d.cx;
    b["cy"] = d.cy;
    b["w"] = d.w;
    b["h"] = d.h;
    b["score"] = d.score;
    out.append(b);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "IR + thermal human-detection toolkit";
  m.attr("__version__") = "0.1.0";

  // ---- images -------------------------------------------------------------
  m.def(
      "load_png", [](const std::string& path) { return array_from_image(img::load_png(path)); },
      py::arg("path"), "Load an 8-bit grayscale PNG as a float32 (H, W) array in [0, 1].");
  m.def(
      "save_png",
      [](const std::string& path, const py::array_t<float, py::array::c_style>& image) {
        img::save_png(path, image_from_array(image));
      },
      py::arg("path"), py::arg("image"), "Save a float32 (H, W) array in [0, 1] as a PNG.");

  // ---- geometry -----------------------------------------------------------
  m.def(
      "apply_homography",
      [](const std::array<double, 9>& h, double u, double v) {
        const geom::PixelPoint p = geom::apply_homography(homography_from_seq(h), {u, v});
        return py::make_tuple(p.u, p.v);
      },
      py::arg("h"), py::arg("u"), py::arg("v"),
      "Apply a row-major 3x3 homography (9 numbers) to a pixel, returning (u, v).");
  m.def(
      "estimate_homography",
      [](const std::vector<std::array<double, 4>>& pairs) {
        align::CorrespondenceSet set;
        for (const auto& p : pairs) set.pairs.push_back({{p[0], p[1]}, {p[2], p[3]}});
        const geom::Homography h = align::alignment_homography(set);
        return h.h;
      },
      py::arg("pairs"),
      "Least-squares homography from (dst_u, dst_v, src_u, src_v) rows; maps src to dst. "
      "Returns 9 row-major numbers normalized to h[8] == 1.");
  m.def(
      "warp_image",
      [](const py::array_t<float, py::array::c_style>& src, const std::array<double, 9>& h,
         int out_width, int out_height) {
        return array_from_image(align::align_thermal_to_ir(
            image_from_array(src), homography_from_seq(h), out_width, out_height));
      },
      py::arg("src"), py::arg("h"), py::arg("out_width"), py::arg("out_height"),
      "Warp src into a (out_height, out_width) frame with the src->dst homography.");

  // ---- calibration ----------------------------------------------------------
  m.def(
      "calibrate",
      [](const std::string& corners_csv, int rows, int cols, double square) {
        const auto views = calib::load_corners_csv(corners_csv);
        const calib::ChessboardSpec spec{rows, cols, square};
        return calibration_dict(calib::calibrate(views, spec));
      },
      py::arg("corners_csv"), py::arg("rows"), py::arg("cols"), py::arg("square"),
      "Calibrate a camera from chessboard corner observations "
      "(CSV header view_id,corner_index,u,v). Returns intrinsics, distortion, and rms.");
  m.def(
      "undistort",
      [](const py::array_t<float, py::array::c_style>& image, const py::dict& cal) {
        const geom::Intrinsics k{cal["fx"].cast<double>(), cal["fy"].cast<double>(),
                                 cal["cx"].cast<double>(), cal["cy"].cast<double>()};
        const geom::Distortion d{cal["k1"].cast<double>(), cal["k2"].cast<double>(),
                                 cal["k3"].cast<double>(), cal["p1"].cast<double>(),
                                 cal["p2"].cast<double>()};
        return array_from_image(img::undistort_image(image_from_array(image), k, d));
      },
      py::arg("image"), py::arg("calibration"),
      "Undistort an image with a calibration dict (fx, fy, cx, cy, k1, k2, k3, p1, p2).");

  // ---- synthetic data -------------------------------------------------------
  m.def(
      "generate_dataset",
      [](int frames, const std::string& out_dir, int size, uint64_t seed, int min_humans,
         int max_humans, bool complementary, double smoke_max, double heat_prob,
         double noise_sigma) {
        synth::GeneratorConfig gc;
        gc.size = size;
        gc.master_seed = seed;
        gc.min_humans = min_humans;
        gc.max_humans = max_humans;
        gc.complementary = complementary;
        gc.smoke_max = smoke_max;
        gc.heat_prob = heat_prob;
        gc.noise_sigma = noise_sigma;
        const synth::DatasetSummary s = synth::make_dataset(frames, gc, out_dir);
        py::dict d;
        d["frames"] = s.frames;
        d["train"] = s.split_counts[0];
        d["val"] = s.split_counts[1];
        d["test"] = s.split_counts[2];
        d["manifest"] = s.manifest_path;
        return d;
      },
      py::arg("frames"), py::arg("out_dir"), py::arg("size") = 128, py::arg("seed") = 1,
      py::arg("min_humans") = 0, py::arg("max_humans") = 3, py::arg("complementary") = false,
      py::arg("smoke_max") = 0.35, py::arg("heat_prob") = 0.5, py::arg("noise_sigma") = 0.01,
      "Generate a deterministic synthetic IR + thermal dataset (ir/, thermal/, labels/, "
      "manifest.json) and return the split counts.");

  // ---- training -------------------------------------------------------------
  m.def(
      "train",
      [](const std::string& dataset, const std::string& out_model, const std::string& split,
         const std::string& mode, double alpha, int input_size, int epochs, int batch,
         double lr, const std::string& lr_schedule, bool fit_anchors, uint64_t seed) {
        const auto samples = train::load_split(dataset, split);
        det::ModelConfig cfg =
            det::make_config(input_size, alpha, det::mode_from_name(mode));
        if (fit_anchors) train::fit_anchors(cfg, samples);
        det::DetectorModel<float> model = det::build_model<float>(cfg);
        train::init_model(model, seed);
        train::HyperParams hp;
        hp.epochs = epochs;
        hp.batch_size = batch;
        hp.lr = lr;
        hp.seed = seed;
        if (lr_schedule == "cosine") {
          hp.lr_schedule = train::LrSchedule::Cosine;
        } else if (lr_schedule != "constant") {
          throw std::invalid_argument("lr_schedule must be constant or cosine");
        }
        const auto log = train::train(model, samples, hp);
        det::save_model(out_model, model);
        py::list out;
        for (const train::EpochStats& e : log) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["loss_total"] = e.loss_total;
          d["loss_loc"] = e.loss_loc;
          d["loss_obj"] = e.loss_obj;
          d["loss_cls"] = e.loss_cls;
          out.append(d);
        }
        return out;
      },
      py::arg("dataset"), py::arg("out_model"), py::arg("split") = "train",
      py::arg("mode") = "fusion", py::arg("alpha") = 1.0, py::arg("input_size") = 416,
      py::arg("epochs") = 100, py::arg("batch") = 32, py::arg("lr") = 0.003,
      py::arg("lr_schedule") = "constant", py::arg("fit_anchors") = false, py::arg("seed") = 1,
      "Train a detector on a generated dataset; writes the weights to out_model and returns "
      "the per-epoch loss log.");

  // ---- inference and evaluation ----------------------------------------------
  m.def(
      "detect",
      [](const std::string& model_path, const py::object& ir, const py::object& thermal,
         double conf, double iou) {
        det::DetectorModel<float> model = det::load_model(model_path);
        img::GrayImage ir_im, th_im;
        if (!ir.is_none()) ir_im = image_from_array(ir.cast<py::array_t<float>>());
        if (!thermal.is_none()) th_im = image_from_array(thermal.cast<py::array_t<float>>());
        const bool use_ir = model.config.mode != det::Mode::SingleThermal;
        const bool use_th = model.config.mode != det::Mode::SingleIr;
        if (use_ir && ir.is_none()) throw std::invalid_argument("model mode needs an IR image");
        if (use_th && thermal.is_none()) {
          throw std::invalid_argument("model mode needs a thermal image");
        }
        return detections_list(det::infer_pair(model, use_ir ? &ir_im : nullptr,
                                               use_th ? &th_im : nullptr, conf, iou));
      },
      py::arg("model"), py::arg("ir") = py::none(), py::arg("thermal") = py::none(),
      py::arg("conf") = 0.25, py::arg("iou") = 0.45,
      "Run one aligned pair through a trained model; returns box dicts in source pixels.");
  m.def(
      "evaluate",
      [](const std::string& model_path, const std::string& dataset, const std::string& split,
         double conf) {
        det::DetectorModel<float> model = det::load_model(model_path);
        const auto samples = train::load_split(dataset, split);
        const train::SplitDetections sd = train::detect_split(model, samples);
        const eval::EvalReport r = eval::summarize(sd.dets, sd.gts, conf);
        py::dict d;
        d["precision"] = r.precision;
        d["recall"] = r.recall;
        d["f1"] = r.f1;
        d["avg_iou"] = r.avg_iou;
        d["map_50"] = r.map_50;
        d["map_50_95"] = r.map_50_95;
        return d;
      },
      py::arg("model"), py::arg("dataset"), py::arg("split") = "test", py::arg("conf") = 0.25,
      "Score a trained model against a dataset split's ground truth.");
}
