// irfusion: one binary exposing the full pipeline as subcommands
// (calibrate, undistort, align, synth, train, detect, eval, bench, replay).
// Every run writes a run manifest (effective config, input/output hashes,
// timing); `replay` re-runs a manifest and checks outputs came back
// byte-identical. Exit codes: 0 ok, 1 runtime/numerical failure, 2
// usage/validation error.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "irfusion/alignment.hpp"
#include "irfusion/calibration.hpp"
#include "irfusion/detector.hpp"
#include "irfusion/geometry.hpp"
#include "irfusion/image.hpp"
#include "irfusion/manifest.hpp"
#include "irfusion/metrics.hpp"
#include "irfusion/synthdata.hpp"
#include "irfusion/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace irfusion;

namespace {

// thrown to force a specific exit code with a message
struct CliError {
  int code;
  std::string message;
};

[[noreturn]] void usage_error(const std::string& msg) { throw CliError{2, msg}; }

// Input-loading phase wrapper: any failure reading or parsing an input file
// is a validation problem (exit 2), not a numerical one.
template <typename F>
auto loading(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const CliError&) {
    throw;
  } catch (const std::exception& e) {
    throw CliError{2, e.what()};
  }
}

void ensure_out_dir(const std::string& dir) {
  if (dir.empty()) usage_error("--out-dir must not be empty");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CliError{1, "cannot create output directory " + dir + ": " + ec.message()};
}

// collects the manifest for one run and writes it at the end
class RunRecorder {
 public:
  RunRecorder(std::string subcommand, ordered_json config)
      : t0_(std::chrono::steady_clock::now()) {
    m_.subcommand = std::move(subcommand);
    m_.config = std::move(config);
  }

  // an unreadable input is a usage problem, same as any other load failure
  void input(const std::string& path) {
    m_.inputs.push_back({path, loading([&] { return cli::fnv1a_file_hex(path); })});
  }
  void output(const std::string& path) {
    m_.outputs.push_back({path, cli::fnv1a_file_hex(path)});
  }
  void measurement() { m_.measurement = true; }

  void finish(const std::string& out_dir) {
    m_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    cli::write_manifest_atomic((fs::path(out_dir) / "run_manifest.json").string(), m_);
  }

 private:
  std::chrono::steady_clock::time_point t0_;
  cli::RunManifest m_;
};

std::string path_in(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateOpts {
  std::string corners;
  int rows = 0, cols = 0;
  double square = 0.0;
  std::string out_dir;
  uint64_t seed = 0;

  ordered_json to_json() const {
    return {{"corners", corners}, {"rows", rows},       {"cols", cols},
            {"square", square},   {"out_dir", out_dir}, {"seed", seed}};
  }
  static CalibrateOpts from_json(const nlohmann::json& j) {
    CalibrateOpts o;
    o.corners = j.at("corners");
    o.rows = j.at("rows");
    o.cols = j.at("cols");
    o.square = j.at("square");
    o.out_dir = j.at("out_dir");
    o.seed = j.at("seed");
    return o;
  }
};

int run_calibrate(const CalibrateOpts& o) {
  if (o.rows < 3 || o.cols < 3) usage_error("board needs at least 3x3 inner corners");
  if (!(o.square > 0.0)) usage_error("--square must be positive");
  ensure_out_dir(o.out_dir);
  RunRecorder rec("calibrate", o.to_json());
  rec.input(o.corners);

  const calib::ChessboardSpec spec{o.rows, o.cols, o.square};
  const auto observations = loading([&] { return calib::load_corners_csv(o.corners); });

  const calib::CalibrationResult result = calib::calibrate(observations, spec);

  // per-view reprojection table
  const std::vector<geom::WorldPoint> pts = calib::planar_target_points(spec);
  std::printf("%-12s %8s %10s\n", "view", "corners", "rms_px");
  for (size_t v = 0; v < observations.size(); ++v) {
    double se = 0.0;
    size_t n = 0;
    for (size_t i = 0; i < pts.size() && i < observations[v].corners.size(); ++i) {
      const geom::PixelPoint p =
          geom::project(pts[i], result.poses[v], result.intrinsics, result.distortion);
      const double du = p.u - observations[v].corners[i].u;
      const double dv = p.v - observations[v].corners[i].v;
      se += du * du + dv * dv;
      ++n;
    }
    std::printf("%-12s %8zu %10.5f\n", observations[v].view_id.c_str(), n,
                n > 0 ? std::sqrt(se / (2.0 * static_cast<double>(n))) : 0.0);
  }
  std::printf("total rms: %.5f px over %zu views\n", result.rms_reprojection,
              observations.size());

  const std::string out = path_in(o.out_dir, "calibration.json");
  calib::save_calibration_json(out, result);
  rec.output(out);
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// undistort

struct UndistortOpts {
  std::string image;
  std::string calib;
  std::string out_dir;
  uint64_t seed = 0;

  ordered_json to_json() const {
    return {{"image", image}, {"calib", calib}, {"out_dir", out_dir}, {"seed", seed}};
  }
  static UndistortOpts from_json(const nlohmann::json& j) {
    UndistortOpts o;
    o.image = j.at("image");
    o.calib = j.at("calib");
    o.out_dir = j.at("out_dir");
    o.seed = j.at("seed");
    return o;
  }
};

int run_undistort(const UndistortOpts& o) {
  ensure_out_dir(o.out_dir);
  RunRecorder rec("undistort", o.to_json());
  rec.input(o.image);
  rec.input(o.calib);

  const img::GrayImage im = loading([&] { return img::load_png(o.image); });
  const calib::CalibrationResult cal =
      loading([&] { return calib::load_calibration_json(o.calib); });

  const img::GrayImage out = img::undistort_image(im, cal.intrinsics, cal.distortion);
  const std::string out_path = path_in(o.out_dir, "undistorted.png");
  img::save_png(out_path, out);
  std::printf("undistorted %dx%d -> %s\n", im.width, im.height, out_path.c_str());

  rec.output(out_path);
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// align

struct AlignOpts {
  std::string ir_corners, thermal_corners;
  int rows = 0, cols = 0;
  double square = 0.0;
  std::string ir_calib, thermal_calib;
  std::string ir_image, thermal_image;
  std::string out_dir;
  uint64_t seed = 0;

  ordered_json to_json() const {
    return {{"ir_corners", ir_corners},
            {"thermal_corners", thermal_corners},
            {"rows", rows},
            {"cols", cols},
            {"square", square},
            {"ir_calib", ir_calib},
            {"thermal_calib", thermal_calib},
            {"ir_image", ir_image},
            {"thermal_image", thermal_image},
            {"out_dir", out_dir},
            {"seed", seed}};
  }
  static AlignOpts from_json(const nlohmann::json& j) {
    AlignOpts o;
    o.ir_corners = j.at("ir_corners");
    o.thermal_corners = j.at("thermal_corners");
    o.rows = j.at("rows");
    o.cols = j.at("cols");
    o.square = j.at("square");
    o.ir_calib = j.at("ir_calib");
    o.thermal_calib = j.at("thermal_calib");
    o.ir_image = j.at("ir_image");
    o.thermal_image = j.at("thermal_image");
    o.out_dir = j.at("out_dir");
    o.seed = j.at("seed");
    return o;
  }
};

// corners were measured on the distorted image; move them to the undistorted frame
calib::CornerObservations undistort_corners(const calib::CornerObservations& obs,
                                            const geom::Intrinsics& k,
                                            const geom::Distortion& d) {
  calib::CornerObservations out;
  out.view_id = obs.view_id;
  out.corners.reserve(obs.corners.size());
  for (const geom::PixelPoint& p : obs.corners) {
    const geom::NormalizedPoint n = geom::undistort_point(geom::to_normalized(p, k), d);
    out.corners.push_back(geom::to_pixel(n, k));
  }
  return out;
}

int run_align(const AlignOpts& o) {
  if (o.rows < 2 || o.cols < 2) usage_error("board needs at least 2x2 inner corners");
  if (!(o.square > 0.0)) usage_error("--square must be positive");
  ensure_out_dir(o.out_dir);
  RunRecorder rec("align", o.to_json());
  for (const std::string& p : {o.ir_corners, o.thermal_corners, o.ir_calib, o.thermal_calib,
                               o.ir_image, o.thermal_image}) {
    rec.input(p);
  }

  const calib::ChessboardSpec spec{o.rows, o.cols, o.square};
  const auto ir_views = loading([&] { return calib::load_corners_csv(o.ir_corners); });
  const auto th_views = loading([&] { return calib::load_corners_csv(o.thermal_corners); });
  const auto ir_cal = loading([&] { return calib::load_calibration_json(o.ir_calib); });
  const auto th_cal = loading([&] { return calib::load_calibration_json(o.thermal_calib); });
  const img::GrayImage ir_raw = loading([&] { return img::load_png(o.ir_image); });
  const img::GrayImage th_raw = loading([&] { return img::load_png(o.thermal_image); });

  // undistortion precedes alignment: images and corner observations both
  const img::GrayImage ir_und = img::undistort_image(ir_raw, ir_cal.intrinsics, ir_cal.distortion);
  const img::GrayImage th_und = img::undistort_image(th_raw, th_cal.intrinsics, th_cal.distortion);

  align::CorrespondenceSet set;
  for (const calib::CornerObservations& iv : ir_views) {
    for (const calib::CornerObservations& tv : th_views) {
      if (iv.view_id != tv.view_id) continue;
      const calib::CornerObservations iu =
          undistort_corners(iv, ir_cal.intrinsics, ir_cal.distortion);
      const calib::CornerObservations tu =
          undistort_corners(tv, th_cal.intrinsics, th_cal.distortion);
      const align::CorrespondenceSet views = align::outer_corner_correspondences(iu, tu, spec);
      set.pairs.insert(set.pairs.end(), views.pairs.begin(), views.pairs.end());
    }
  }
  if (set.pairs.empty()) usage_error("corner files share no view_id");

  const geom::Homography h = align::alignment_homography(set);

  double sum = 0.0, worst = 0.0;
  for (const auto& [ir_px, th_px] : set.pairs) {
    const geom::PixelPoint mapped = geom::apply_homography(h, th_px);
    const double e = std::hypot(mapped.u - ir_px.u, mapped.v - ir_px.v);
    sum += e;
    worst = std::max(worst, e);
  }
  std::printf("alignment from %zu corner pairs: mean deviation %.4f px, max %.4f px\n",
              set.pairs.size(), sum / static_cast<double>(set.pairs.size()), worst);

  const img::GrayImage warped = align::align_thermal_to_ir(th_und, h, ir_und.width, ir_und.height);
  const std::vector<uint8_t> mask =
      img::warp_valid_mask(h, th_und.width, th_und.height, ir_und.width, ir_und.height);
  const align::AlignedPair cropped = align::crop_common(ir_und, warped, mask);
  std::printf("common region: %dx%d at (%d, %d)\n", cropped.crop.w, cropped.crop.h,
              cropped.crop.x, cropped.crop.y);

  // checker blend of the cropped pair: alternating 16 px tiles
  img::GrayImage overlay(cropped.ir.width, cropped.ir.height);
  for (int y = 0; y < overlay.height; ++y) {
    for (int x = 0; x < overlay.width; ++x) {
      const bool tile = ((x / 16) + (y / 16)) % 2 == 0;
      overlay.at(x, y) = tile ? cropped.ir.at(x, y) : cropped.thermal_warped.at(x, y);
    }
  }

  const std::string h_path = path_in(o.out_dir, "homography.txt");
  geom::save_homography(h_path, h);
  const std::vector<std::pair<std::string, const img::GrayImage*>> images = {
      {"ir_undistorted.png", &ir_und},   {"thermal_undistorted.png", &th_und},
      {"thermal_warped.png", &warped},   {"ir_cropped.png", &cropped.ir},
      {"thermal_cropped.png", &cropped.thermal_warped}, {"overlay_checker.png", &overlay}};
  rec.output(h_path);
  for (const auto& [name, image] : images) {
    const std::string p = path_in(o.out_dir, name);
    img::save_png(p, *image);
    rec.output(p);
  }
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  int frames = 0;
  int size = 128;
  int min_humans = 0;
  int max_humans = 3;
  bool complementary = false;
  double smoke_max = 0.35;
  double heat_prob = 0.5;
  double noise_sigma = 0.01;
  uint64_t seed = 1;
  std::string out_dir;

  ordered_json to_json() const {
    return {{"frames", frames},
            {"size", size},
            {"min_humans", min_humans},
            {"max_humans", max_humans},
            {"complementary", complementary},
            {"smoke_max", smoke_max},
            {"heat_prob", heat_prob},
            {"noise_sigma", noise_sigma},
            {"seed", seed},
            {"out_dir", out_dir}};
  }
  static SynthOpts from_json(const nlohmann::json& j) {
    SynthOpts o;
    o.frames = j.at("frames");
    o.size = j.at("size");
    o.min_humans = j.at("min_humans");
    o.max_humans = j.at("max_humans");
    o.complementary = j.at("complementary");
    o.smoke_max = j.at("smoke_max");
    o.heat_prob = j.at("heat_prob");
    o.noise_sigma = j.at("noise_sigma");
    o.seed = j.at("seed");
    o.out_dir = j.at("out_dir");
    return o;
  }
};

int run_synth(const SynthOpts& o) {
  ensure_out_dir(o.out_dir);
  RunRecorder rec("synth", o.to_json());

  synth::GeneratorConfig gc;
  gc.size = o.size;
  gc.min_humans = o.min_humans;
  gc.max_humans = o.max_humans;
  gc.complementary = o.complementary;
  gc.smoke_max = o.smoke_max;
  gc.heat_prob = o.heat_prob;
  gc.noise_sigma = o.noise_sigma;
  gc.master_seed = o.seed;
  const synth::DatasetSummary sum = synth::make_dataset(o.frames, gc, o.out_dir);

  std::printf("wrote %d frames to %s (train %d, val %d, test %d)\n", sum.frames,
              o.out_dir.c_str(), sum.split_counts[0], sum.split_counts[1], sum.split_counts[2]);

  for (int i = 0; i < o.frames; ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%05d", i);
    rec.output(path_in(o.out_dir, std::string("ir/") + stem + ".png"));
    rec.output(path_in(o.out_dir, std::string("thermal/") + stem + ".png"));
    rec.output(path_in(o.out_dir, std::string("labels/") + stem + ".txt"));
  }
  rec.output(sum.manifest_path);
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// shared dataset helpers (train / detect / eval / bench)

struct DatasetFrames {
  std::vector<std::string> stems;          // frames in the requested split
  std::vector<train::TrainSample> samples;  // same order
};

// reads the dataset manifest for the stems of a split, then loads the frames
DatasetFrames load_dataset_frames(const std::string& root, const std::string& split,
                                  RunRecorder* rec) {
  if (split != "train" && split != "val" && split != "test" && split != "all") {
    usage_error("--split must be train, val, test, or all");
  }
  return loading([&] {
    const std::string manifest_path = (fs::path(root) / "manifest.json").string();
    std::ifstream mf(manifest_path);
    if (!mf.good()) throw std::runtime_error("cannot read dataset manifest " + manifest_path);
    nlohmann::json manifest;
    mf >> manifest;
    if (rec) rec->input(manifest_path);

    DatasetFrames out;
    for (const auto& jf : manifest.at("frames")) {
      if (split != "all" && jf.at("split").get<std::string>() != split) continue;
      const std::string stem = jf.at("stem").get<std::string>();
      const std::string ir_p = (fs::path(root) / "ir" / (stem + ".png")).string();
      const std::string th_p = (fs::path(root) / "thermal" / (stem + ".png")).string();
      const std::string lb_p = (fs::path(root) / "labels" / (stem + ".txt")).string();
      train::TrainSample s;
      s.ir = img::load_png(ir_p);
      s.thermal = img::load_png(th_p);
      s.boxes = align::load_labels(lb_p, s.ir.width, s.ir.height);
      if (rec) {
        rec->input(ir_p);
        rec->input(th_p);
        rec->input(lb_p);
      }
      out.stems.push_back(stem);
      out.samples.push_back(std::move(s));
    }
    if (out.samples.empty()) {
      throw std::runtime_error("dataset " + root + " has no frames in split '" + split + "'");
    }
    return out;
  });
}

det::Mode parse_mode(const std::string& name) {
  try {
    return det::mode_from_name(name);
  } catch (const std::exception& e) {
    usage_error(e.what());
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string dataset;
  std::string split = "train";
  std::string mode = "fusion";
  double alpha = 1.0;
  int input_size = 416;
  int epochs = 100;
  int batch = 32;
  double lr = 0.003;
  std::string lr_schedule = "constant";
  bool fit_anchors = false;
  uint64_t seed = 1;
  std::string out_dir;

  ordered_json to_json() const {
    return {{"dataset", dataset}, {"split", split},   {"mode", mode},
            {"alpha", alpha},     {"input_size", input_size}, {"epochs", epochs},
            {"batch", batch},     {"lr", lr},         {"lr_schedule", lr_schedule},
            {"fit_anchors", fit_anchors}, {"seed", seed}, {"out_dir", out_dir}};
  }
  static TrainOpts from_json(const nlohmann::json& j) {
    TrainOpts o;
    o.dataset = j.at("dataset");
    o.split = j.at("split");
    o.mode = j.at("mode");
    o.alpha = j.at("alpha");
    o.input_size = j.at("input_size");
    o.epochs = j.at("epochs");
    o.batch = j.at("batch");
    o.lr = j.at("lr");
    o.lr_schedule = j.at("lr_schedule");
    o.fit_anchors = j.at("fit_anchors");
    o.seed = j.at("seed");
    o.out_dir = j.at("out_dir");
    return o;
  }
};

int run_train(const TrainOpts& o) {
  ensure_out_dir(o.out_dir);
  RunRecorder rec("train", o.to_json());

  const DatasetFrames data = load_dataset_frames(o.dataset, o.split, &rec);
  det::ModelConfig cfg = det::make_config(o.input_size, o.alpha, parse_mode(o.mode));
  if (o.fit_anchors) {
    train::fit_anchors(cfg, data.samples);
    std::printf("fitted anchors:");
    for (const auto& scale : cfg.anchors) {
      for (const auto& a : scale) std::printf(" (%.1f, %.1f)", a[0], a[1]);
    }
    std::printf("\n");
  }
  det::DetectorModel<float> model = det::build_model<float>(cfg);
  train::init_model(model, o.seed);

  train::HyperParams hp;
  hp.epochs = o.epochs;
  hp.batch_size = o.batch;
  hp.lr = o.lr;
  hp.seed = o.seed;
  if (o.lr_schedule == "cosine") {
    hp.lr_schedule = train::LrSchedule::Cosine;
  } else if (o.lr_schedule != "constant") {
    usage_error("--lr-schedule must be constant or cosine");
  }

  std::printf("training %s alpha=%g S=%d on %zu frames (%s split), %d epochs\n",
              o.mode.c_str(), o.alpha, o.input_size, data.samples.size(), o.split.c_str(),
              o.epochs);
  const std::vector<train::EpochStats> log =
      train::train(model, data.samples, hp, [](const train::EpochStats& e) {
        std::printf("epoch %4d  total %.6f  loc %.6f  obj %.6f  cls %.6f\n", e.epoch,
                    e.loss_total, e.loss_loc, e.loss_obj, e.loss_cls);
        std::fflush(stdout);
      });

  const std::string model_path = path_in(o.out_dir, "model.bin");
  det::save_model(model_path, model);
  const std::string csv_path = path_in(o.out_dir, "loss_curve.csv");
  train::write_loss_csv(csv_path, log);

  rec.output(model_path);
  rec.output(model_path + ".json");
  rec.output(csv_path);
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// detect

struct DetectOpts {
  std::string model;
  std::string dataset;  // dataset mode when set
  std::string split = "test";
  std::string ir, thermal;  // single-pair mode
  double conf = 0.25;
  double iou = 0.45;
  bool overlay = false;
  uint64_t seed = 0;
  std::string out_dir;

  ordered_json to_json() const {
    return {{"model", model}, {"dataset", dataset}, {"split", split},
            {"ir", ir},       {"thermal", thermal}, {"conf", conf},
            {"iou", iou},     {"overlay", overlay}, {"seed", seed},
            {"out_dir", out_dir}};
  }
  static DetectOpts from_json(const nlohmann::json& j) {
    DetectOpts o;
    o.model = j.at("model");
    o.dataset = j.at("dataset");
    o.split = j.at("split");
    o.ir = j.at("ir");
    o.thermal = j.at("thermal");
    o.conf = j.at("conf");
    o.iou = j.at("iou");
    o.overlay = j.at("overlay");
    o.seed = j.at("seed");
    o.out_dir = j.at("out_dir");
    return o;
  }
};

ordered_json detection_line(const std::string& frame, const std::vector<det::Detection>& dets) {
  ordered_json boxes = ordered_json::array();
  for (const det::Detection& d : dets) {
    boxes.push_back(
        {{"cx", d.cx}, {"cy", d.cy}, {"w", d.w}, {"h", d.h}, {"score", d.score}});
  }
  return {{"frame", frame}, {"boxes", boxes}};
}

int run_detect(const DetectOpts& o) {
  ensure_out_dir(o.out_dir);
  RunRecorder rec("detect", o.to_json());
  rec.input(o.model);
  rec.input(o.model + ".json");

  det::DetectorModel<float> model = loading([&] { return det::load_model(o.model); });
  const bool need_ir = model.config.mode != det::Mode::SingleThermal;
  const bool need_th = model.config.mode != det::Mode::SingleIr;

  std::vector<std::string> stems;
  std::vector<train::TrainSample> samples;
  if (!o.dataset.empty()) {
    if (!o.ir.empty() || !o.thermal.empty()) {
      usage_error("--dataset and --ir/--thermal are mutually exclusive");
    }
    DatasetFrames data = load_dataset_frames(o.dataset, o.split, &rec);
    stems = std::move(data.stems);
    samples = std::move(data.samples);
  } else {
    if (need_ir && o.ir.empty()) usage_error("model mode needs --ir");
    if (need_th && o.thermal.empty()) usage_error("model mode needs --thermal");
    train::TrainSample s;
    std::string stem = "pair";
    if (!o.ir.empty()) {
      s.ir = loading([&] { return img::load_png(o.ir); });
      rec.input(o.ir);
      stem = fs::path(o.ir).stem().string();
    }
    if (!o.thermal.empty()) {
      s.thermal = loading([&] { return img::load_png(o.thermal); });
      rec.input(o.thermal);
      if (o.ir.empty()) stem = fs::path(o.thermal).stem().string();
    }
    if (o.ir.empty()) s.ir = s.thermal;  // keep the pair shape-consistent
    if (o.thermal.empty()) s.thermal = s.ir;
    stems.push_back(stem);
    samples.push_back(std::move(s));
  }

  const std::string jsonl_path = path_in(o.out_dir, "detections.jsonl");
  std::ofstream jsonl(jsonl_path);
  if (!jsonl) throw CliError{1, "cannot write " + jsonl_path};

  size_t total = 0;
  std::vector<std::string> overlay_paths;
  for (size_t i = 0; i < samples.size(); ++i) {
    const train::TrainSample& s = samples[i];
    const std::vector<det::Detection> dets =
        det::infer_pair(model, need_ir ? &s.ir : nullptr, need_th ? &s.thermal : nullptr,
                        o.conf, o.iou);
    total += dets.size();
    jsonl << detection_line(stems[i], dets).dump() << "\n";
    if (o.overlay) {
      const img::GrayImage& base = need_ir ? s.ir : s.thermal;
      const std::string p = path_in(o.out_dir, "overlay_" + stems[i] + ".png");
      img::save_png(p, det::draw_detections(base, dets));
      overlay_paths.push_back(p);
    }
  }
  jsonl.close();
  std::printf("%zu detections over %zu frames -> %s\n", total, samples.size(),
              jsonl_path.c_str());

  rec.output(jsonl_path);
  for (const std::string& p : overlay_paths) rec.output(p);
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string detections;  // jsonl; or empty when --model runs inference here
  std::string model;
  std::string dataset;
  std::string split = "test";
  double conf = 0.25;
  double iou = 0.45;
  uint64_t seed = 0;
  std::string out_dir;

  ordered_json to_json() const {
    return {{"detections", detections}, {"model", model}, {"dataset", dataset},
            {"split", split},           {"conf", conf},   {"iou", iou},
            {"seed", seed},             {"out_dir", out_dir}};
  }
  static EvalOpts from_json(const nlohmann::json& j) {
    EvalOpts o;
    o.detections = j.at("detections");
    o.model = j.at("model");
    o.dataset = j.at("dataset");
    o.split = j.at("split");
    o.conf = j.at("conf");
    o.iou = j.at("iou");
    o.seed = j.at("seed");
    o.out_dir = j.at("out_dir");
    return o;
  }
};

int run_eval(const EvalOpts& o) {
  if (o.dataset.empty()) usage_error("--dataset is required (ground truth source)");
  if (o.detections.empty() == o.model.empty()) {
    usage_error("exactly one of --detections or --model must be given");
  }
  ensure_out_dir(o.out_dir);
  RunRecorder rec("eval", o.to_json());

  const DatasetFrames data = load_dataset_frames(o.dataset, o.split, &rec);
  std::vector<std::vector<det::GroundTruthBox>> gts;
  gts.reserve(data.samples.size());
  for (const train::TrainSample& s : data.samples) gts.push_back(s.boxes);

  std::vector<std::vector<det::Detection>> dets(data.samples.size());
  if (!o.model.empty()) {
    rec.input(o.model);
    rec.input(o.model + ".json");
    det::DetectorModel<float> model = loading([&] { return det::load_model(o.model); });
    // low floor: mAP needs the full ranking; the conf threshold applies to P/R
    dets = train::detect_split(model, data.samples, 0.001, o.iou).dets;
  } else {
    rec.input(o.detections);
    std::map<std::string, size_t> stem_index;
    for (size_t i = 0; i < data.stems.size(); ++i) stem_index[data.stems[i]] = i;
    loading([&] {
      std::ifstream f(o.detections);
      if (!f.good()) throw std::runtime_error("cannot read " + o.detections);
      std::string line;
      size_t lineno = 0;
      while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
          throw std::runtime_error(o.detections + ": line " + std::to_string(lineno) + ": " +
                                   e.what());
        }
        const std::string frame = j.at("frame").get<std::string>();
        const auto it = stem_index.find(frame);
        if (it == stem_index.end()) {
          throw std::runtime_error(o.detections + ": line " + std::to_string(lineno) +
                                   ": frame '" + frame + "' is not in split '" + o.split + "'");
        }
        std::vector<det::Detection>& frame_dets = dets[it->second];
        for (const auto& jb : j.at("boxes")) {
          det::Detection d;
          d.cx = jb.at("cx").get<double>();
          d.cy = jb.at("cy").get<double>();
          d.w = jb.at("w").get<double>();
          d.h = jb.at("h").get<double>();
          d.score = jb.at("score").get<double>();
          d.objectness = d.score;
          d.class_probs = {1.0};
          frame_dets.push_back(d);
        }
      }
      return 0;
    });
  }

  eval::EvalReport report = eval::summarize(dets, gts, o.conf);
  const std::string config_echo = "split=" + o.split + " conf=" + std::to_string(o.conf) +
                                  (o.model.empty() ? " detections=" + o.detections
                                                   : " model=" + o.model);
  const std::string json_text = eval::report_json(report, config_echo, eval::cpu_descriptor());
  const std::string report_path = path_in(o.out_dir, "report.json");
  {
    std::ofstream f(report_path);
    if (!f) throw CliError{1, "cannot write " + report_path};
    f << json_text << "\n";
  }
  std::fputs(eval::report_table(report).c_str(), stdout);

  rec.output(report_path);
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchOpts {
  std::string model;
  std::string dataset;
  std::string split = "test";
  int warmup = 10;
  int measured = 100;
  uint64_t seed = 0;
  std::string out_dir;

  ordered_json to_json() const {
    return {{"model", model},     {"dataset", dataset}, {"split", split},
            {"warmup", warmup},   {"measured", measured}, {"seed", seed},
            {"out_dir", out_dir}};
  }
  static BenchOpts from_json(const nlohmann::json& j) {
    BenchOpts o;
    o.model = j.at("model");
    o.dataset = j.at("dataset");
    o.split = j.at("split");
    o.warmup = j.at("warmup");
    o.measured = j.at("measured");
    o.seed = j.at("seed");
    o.out_dir = j.at("out_dir");
    return o;
  }
};

int run_bench(const BenchOpts& o) {
  ensure_out_dir(o.out_dir);
  RunRecorder rec("bench", o.to_json());
  rec.measurement();
  rec.input(o.model);
  rec.input(o.model + ".json");

  det::DetectorModel<float> model = loading([&] { return det::load_model(o.model); });
  const DatasetFrames data = load_dataset_frames(o.dataset, o.split, &rec);

  std::vector<std::pair<img::GrayImage, img::GrayImage>> frames;
  frames.reserve(data.samples.size());
  for (const train::TrainSample& s : data.samples) frames.emplace_back(s.ir, s.thermal);

  const eval::FpsResult r = eval::fps_bench(model, frames, o.warmup, o.measured);
  std::printf("%.2f FPS end-to-end (input %d, %s) on %s\n", r.fps, model.config.input_size,
              det::mode_name(model.config.mode).c_str(), r.hardware.c_str());

  ordered_json j;
  j["fps"] = r.fps;
  j["hardware"] = r.hardware;
  j["input_size"] = model.config.input_size;
  j["mode"] = det::mode_name(model.config.mode);
  j["warmup"] = o.warmup;
  j["measured"] = o.measured;
  const std::string bench_path = path_in(o.out_dir, "bench.json");
  {
    std::ofstream f(bench_path);
    if (!f) throw CliError{1, "cannot write " + bench_path};
    f << j.dump(2) << "\n";
  }

  rec.output(bench_path);
  rec.finish(o.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------
// replay

int dispatch_config(const std::string& subcommand, const nlohmann::json& config);

int run_replay(const std::string& manifest_path) {
  const cli::RunManifest m = loading([&] { return cli::load_manifest(manifest_path); });

  // inputs must be what the original run saw, or byte-identity is hopeless
  for (const cli::FileHash& in : m.inputs) {
    const std::string now = loading([&] { return cli::fnv1a_file_hex(in.path); });
    if (now != in.fnv1a64) {
      throw CliError{1, "replay: input changed since the original run: " + in.path};
    }
  }

  const int rc = dispatch_config(m.subcommand, m.config);
  if (rc != 0) return rc;

  if (m.measurement) {
    std::printf("replay: %s re-measured (measurement outputs are not byte-compared)\n",
                m.subcommand.c_str());
    return 0;
  }
  size_t checked = 0;
  for (const cli::FileHash& out : m.outputs) {
    const std::string now = cli::fnv1a_file_hex(out.path);
    if (now != out.fnv1a64) {
      throw CliError{1, "replay: output differs from the original run: " + out.path};
    }
    ++checked;
  }
  std::printf("replay: %s reproduced %zu outputs byte-identically\n", m.subcommand.c_str(),
              checked);
  return 0;
}

int dispatch_config(const std::string& subcommand, const nlohmann::json& config) {
  try {
    if (subcommand == "calibrate") return run_calibrate(CalibrateOpts::from_json(config));
    if (subcommand == "undistort") return run_undistort(UndistortOpts::from_json(config));
    if (subcommand == "align") return run_align(AlignOpts::from_json(config));
    if (subcommand == "synth") return run_synth(SynthOpts::from_json(config));
    if (subcommand == "train") return run_train(TrainOpts::from_json(config));
    if (subcommand == "detect") return run_detect(DetectOpts::from_json(config));
    if (subcommand == "eval") return run_eval(EvalOpts::from_json(config));
    if (subcommand == "bench") return run_bench(BenchOpts::from_json(config));
  } catch (const nlohmann::json::exception& e) {
    usage_error("manifest config is missing keys for '" + subcommand + "': " + e.what());
  }
  usage_error("manifest names unknown subcommand '" + subcommand + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IR + thermal human-detection pipeline: calibration, alignment, synthetic data, "
               "detector training, inference, and evaluation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI config file with one section per subcommand");
  app.allow_config_extras(false);
  app.set_version_flag("--version", std::string(cli::kToolName) + " " + cli::kToolVersion);

  CalibrateOpts cal;
  CLI::App* c_cal = app.add_subcommand("calibrate", "Estimate camera intrinsics from corner CSV");
  c_cal->add_option("--corners", cal.corners, "corner observations CSV")->required();
  c_cal->add_option("--rows", cal.rows, "inner corner rows")->required();
  c_cal->add_option("--cols", cal.cols, "inner corner columns")->required();
  c_cal->add_option("--square", cal.square, "square size (mm)")->required();
  c_cal->add_option("--out-dir", cal.out_dir, "output directory")->required();
  c_cal->add_option("--seed", cal.seed, "run seed (recorded; calibration is deterministic)");

  UndistortOpts und;
  CLI::App* c_und = app.add_subcommand("undistort", "Undistort an image with a calibration");
  c_und->add_option("--image", und.image, "input PNG")->required();
  c_und->add_option("--calib", und.calib, "calibration JSON")->required();
  c_und->add_option("--out-dir", und.out_dir, "output directory")->required();
  c_und->add_option("--seed", und.seed, "run seed (recorded)");

  AlignOpts ali;
  CLI::App* c_ali = app.add_subcommand("align", "Estimate thermal->IR homography and register");
  c_ali->add_option("--ir-corners", ali.ir_corners, "IR corner CSV")->required();
  c_ali->add_option("--thermal-corners", ali.thermal_corners, "thermal corner CSV")->required();
  c_ali->add_option("--rows", ali.rows, "inner corner rows")->required();
  c_ali->add_option("--cols", ali.cols, "inner corner columns")->required();
  c_ali->add_option("--square", ali.square, "square size (mm)")->required();
  c_ali->add_option("--ir-calib", ali.ir_calib, "IR calibration JSON")->required();
  c_ali->add_option("--thermal-calib", ali.thermal_calib, "thermal calibration JSON")->required();
  c_ali->add_option("--ir-image", ali.ir_image, "IR PNG")->required();
  c_ali->add_option("--thermal-image", ali.thermal_image, "thermal PNG")->required();
  c_ali->add_option("--out-dir", ali.out_dir, "output directory")->required();
  c_ali->add_option("--seed", ali.seed, "run seed (recorded)");

  SynthOpts syn;
  CLI::App* c_syn = app.add_subcommand("synth", "Generate a synthetic aligned-pair dataset");
  c_syn->add_option("--frames", syn.frames, "number of frames")->required();
  c_syn->add_option("--size", syn.size, "square frame size (pixels)");
  c_syn->add_option("--min-humans", syn.min_humans, "minimum humans per frame");
  c_syn->add_option("--max-humans", syn.max_humans, "maximum humans per frame");
  c_syn->add_flag("--complementary", syn.complementary,
                  "alternate heavy smoke / heat distractors per frame");
  c_syn->add_option("--smoke-max", syn.smoke_max, "plain regime: max smoke density");
  c_syn->add_option("--heat-prob", syn.heat_prob, "plain regime: heat source probability");
  c_syn->add_option("--noise-sigma", syn.noise_sigma, "sensor noise sigma");
  c_syn->add_option("--seed", syn.seed, "master seed");
  c_syn->add_option("--out-dir", syn.out_dir, "dataset root directory")->required();

  TrainOpts trn;
  CLI::App* c_trn = app.add_subcommand("train", "Train a detector on a generated dataset");
  c_trn->add_option("--dataset", trn.dataset, "dataset root")->required();
  c_trn->add_option("--split", trn.split, "training split (train/val/test/all)");
  c_trn->add_option("--mode", trn.mode, "fusion, single_ir, or single_thermal");
  c_trn->add_option("--alpha", trn.alpha, "width multiplier");
  c_trn->add_option("--input-size", trn.input_size, "network input size (multiple of 32)");
  c_trn->add_option("--epochs", trn.epochs, "training epochs");
  c_trn->add_option("--batch", trn.batch, "minibatch size");
  c_trn->add_option("--lr", trn.lr, "Adam learning rate");
  c_trn->add_option("--lr-schedule", trn.lr_schedule, "constant (default) or cosine decay");
  c_trn->add_flag("--fit-anchors", trn.fit_anchors,
                  "fit anchors to the training boxes (k-means) instead of the defaults");
  c_trn->add_option("--seed", trn.seed, "weight init + shuffle seed");
  c_trn->add_option("--out-dir", trn.out_dir, "output directory")->required();

  DetectOpts dtc;
  CLI::App* c_dtc = app.add_subcommand("detect", "Run inference, write detections + overlays");
  c_dtc->add_option("--model", dtc.model, "model weights path (model.bin)")->required();
  c_dtc->add_option("--dataset", dtc.dataset, "dataset root (batch mode)");
  c_dtc->add_option("--split", dtc.split, "dataset split (batch mode)");
  c_dtc->add_option("--ir", dtc.ir, "single IR PNG");
  c_dtc->add_option("--thermal", dtc.thermal, "single thermal PNG");
  c_dtc->add_option("--conf", dtc.conf, "confidence threshold");
  c_dtc->add_option("--iou", dtc.iou, "NMS IoU threshold");
  c_dtc->add_flag("--overlay", dtc.overlay, "write overlay PNGs with drawn boxes");
  c_dtc->add_option("--seed", dtc.seed, "run seed (recorded; inference is deterministic)");
  c_dtc->add_option("--out-dir", dtc.out_dir, "output directory")->required();

  EvalOpts evl;
  CLI::App* c_evl = app.add_subcommand("eval", "Score detections against dataset ground truth");
  c_evl->add_option("--detections", evl.detections, "detections JSONL (from detect)");
  c_evl->add_option("--model", evl.model, "model path (runs inference instead)");
  c_evl->add_option("--dataset", evl.dataset, "dataset root")->required();
  c_evl->add_option("--split", evl.split, "dataset split");
  c_evl->add_option("--conf", evl.conf, "confidence threshold for P/R/F1");
  c_evl->add_option("--iou", evl.iou, "NMS IoU threshold (model mode)");
  c_evl->add_option("--seed", evl.seed, "run seed (recorded)");
  c_evl->add_option("--out-dir", evl.out_dir, "output directory")->required();

  BenchOpts ben;
  CLI::App* c_ben = app.add_subcommand("bench", "Measure end-to-end inference FPS");
  c_ben->add_option("--model", ben.model, "model weights path")->required();
  c_ben->add_option("--dataset", ben.dataset, "dataset root")->required();
  c_ben->add_option("--split", ben.split, "dataset split");
  c_ben->add_option("--warmup", ben.warmup, "unmeasured warmup frames");
  c_ben->add_option("--measured", ben.measured, "measured frames");
  c_ben->add_option("--seed", ben.seed, "run seed (recorded)");
  c_ben->add_option("--out-dir", ben.out_dir, "output directory")->required();

  std::string replay_manifest;
  CLI::App* c_rep = app.add_subcommand("replay", "Re-run a manifest and verify outputs");
  c_rep->add_option("--manifest", replay_manifest, "run_manifest.json from a previous run")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (app.got_subcommand(c_cal)) return run_calibrate(cal);
    if (app.got_subcommand(c_und)) return run_undistort(und);
    if (app.got_subcommand(c_ali)) return run_align(ali);
    if (app.got_subcommand(c_syn)) return run_synth(syn);
    if (app.got_subcommand(c_trn)) return run_train(trn);
    if (app.got_subcommand(c_dtc)) return run_detect(dtc);
    if (app.got_subcommand(c_evl)) return run_eval(evl);
    if (app.got_subcommand(c_ben)) return run_bench(ben);
    if (app.got_subcommand(c_rep)) return run_replay(replay_manifest);
  } catch (const CliError& e) {
    std::fprintf(stderr, "error: %s\n", e.message.c_str());
    return e.code;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
