#include "doctest.h"

#include "irfusion/synthdata.hpp"
#include "irfusion/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

using namespace irfusion;
using namespace irfusion::synth;

namespace {

SceneSpec one_human_spec(uint64_t seed, double cx = 64, double cy = 64, double height = 52,
                         int posture = 0) {
  SceneSpec s;
  s.width = 128;
  s.height = 128;
  s.humans.push_back({cx, cy, height, posture});
  s.seed = seed;
  return s;
}

// bounding box of pixels brighter than thr, as a center-format box
det::GroundTruthBox threshold_box(const img::GrayImage& im, float thr) {
  int minx = im.width, maxx = -1, miny = im.height, maxy = -1;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      if (im.at(x, y) > thr) {
        minx = std::min(minx, x);
        maxx = std::max(maxx, x);
        miny = std::min(miny, y);
        maxy = std::max(maxy, y);
      }
  REQUIRE(maxx >= minx);
  return {0.5 * (minx + maxx), 0.5 * (miny + maxy), double(maxx - minx + 1),
          double(maxy - miny + 1), 0};
}

double mean_inside_boxes(const img::GrayImage& im, const std::vector<det::GroundTruthBox>& boxes,
                         bool inside) {
  double sum = 0.0;
  long n = 0;
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) {
      bool in = false;
      for (const auto& b : boxes) {
        if (std::abs(x - b.cx) <= b.w / 2 && std::abs(y - b.cy) <= b.h / 2) in = true;
      }
      if (in == inside) {
        sum += im.at(x, y);
        ++n;
      }
    }
  return n > 0 ? sum / n : 0.0;
}

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_SUITE("synth-render") {

TEST_CASE("same seed renders a bit-identical pair, other seeds differ") {
  SceneSpec s = one_human_spec(42);
  s.smoke_density = 0.4;
  s.heat_sources.push_back({100, 30, 9, 0.8});
  s.noise_sigma = 0.01;
  const RenderedPair a = render_pair(s);
  const RenderedPair b = render_pair(s);
  REQUIRE(a.ir.px.size() == b.ir.px.size());
  for (size_t i = 0; i < a.ir.px.size(); ++i) CHECK(a.ir.px[i] == b.ir.px[i]);
  for (size_t i = 0; i < a.thermal.px.size(); ++i) CHECK(a.thermal.px[i] == b.thermal.px[i]);
  REQUIRE(a.gt_boxes.size() == b.gt_boxes.size());
  CHECK(a.gt_boxes[0].cx == b.gt_boxes[0].cx);

  s.seed = 43;
  const RenderedPair c = render_pair(s);
  size_t diff = 0;
  for (size_t i = 0; i < a.ir.px.size(); ++i) diff += a.ir.px[i] != c.ir.px[i];
  CHECK(diff > 1000);
}

TEST_CASE("empty scene leaves the thermal image at background level") {
  SceneSpec s;
  s.width = 128;
  s.height = 128;
  s.noise_sigma = 0.01;
  s.seed = 5;
  const RenderedPair p = render_pair(s);
  float peak = 0.0f;
  for (const float v : p.thermal.px) peak = std::max(peak, v);
  CHECK(peak < 0.2f);
  CHECK(p.gt_boxes.empty());
}

TEST_CASE("ground-truth boxes tightly bound the rendered IR extent") {
  const uint64_t seeds[] = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  int idx = 0;
  for (const uint64_t seed : seeds) {
    CAPTURE(seed);
    const double heights[] = {30, 44, 52, 64};
    const SceneSpec s = one_human_spec(seed, 40.0 + 6 * idx, 50.0 + 3 * idx,
                                       heights[idx % 4], idx % 3);
    ++idx;
    const RenderedPair p = render_pair(s);  // no smoke, no noise
    REQUIRE(p.gt_boxes.size() == 1);
    const det::GroundTruthBox rendered = threshold_box(p.ir, 0.35f);
    CHECK(box_iou(p.gt_boxes[0], rendered) >= 0.95);
  }
}

TEST_CASE("full smoke blinds the IR human signature") {
  SceneSpec clean = one_human_spec(77);
  SceneSpec smoked = clean;
  smoked.smoke_density = 1.0;
  const RenderedPair pc = render_pair(clean);
  const RenderedPair ps = render_pair(smoked);
  REQUIRE(pc.gt_boxes.size() == 1);
  const double contrast_clean = mean_inside_boxes(pc.ir, pc.gt_boxes, true) -
                                mean_inside_boxes(pc.ir, pc.gt_boxes, false);
  const double contrast_smoked = mean_inside_boxes(ps.ir, ps.gt_boxes, true) -
                                 mean_inside_boxes(ps.ir, ps.gt_boxes, false);
  CHECK(contrast_clean > 0.2);
  CHECK(std::abs(contrast_smoked) < 0.2 * contrast_clean);

  // thermal is untouched by smoke
  double max_dt = 0.0;
  for (size_t i = 0; i < pc.thermal.px.size(); ++i) {
    max_dt = std::max(max_dt, std::abs(double(pc.thermal.px[i]) - ps.thermal.px[i]));
  }
  CHECK(max_dt == 0.0);
}

TEST_CASE("gt homography re-aligns the thermal body onto the IR body") {
  SceneSpec s = one_human_spec(31);
  // a visibly nontrivial rig: rotation + shift about the center
  const double th = 0.04, c = 63.5;
  const geom::Homography m{{std::cos(th), -std::sin(th), 2.5, std::sin(th), std::cos(th), -1.5,
                            0.0, 0.0, 1.0}};
  const geom::Homography tc{{1, 0, c, 0, 1, c, 0, 0, 1}};
  const geom::Homography tci{{1, 0, -c, 0, 1, -c, 0, 0, 1}};
  s.thermal_to_ir = geom::multiply(tc, geom::multiply(m, tci));
  const RenderedPair p = render_pair(s);

  // the raw thermal frame must NOT already coincide with IR
  const det::GroundTruthBox raw = threshold_box(p.thermal, 0.5f);
  const img::GrayImage aligned =
      align::align_thermal_to_ir(p.thermal, p.gt_homography, s.width, s.height);
  const det::GroundTruthBox after = threshold_box(aligned, 0.5f);
  const det::GroundTruthBox ir_body = threshold_box(p.ir, 0.35f);
  CHECK(std::abs(after.cx - ir_body.cx) < 1.0);
  CHECK(std::abs(after.cy - ir_body.cy) < 1.0);
  const double raw_off = std::hypot(raw.cx - ir_body.cx, raw.cy - ir_body.cy);
  CHECK(raw_off > 1.5);
}

TEST_CASE("invalid scene geometry is rejected") {
  CHECK_THROWS_AS(static_cast<void>(render_pair(one_human_spec(1, 5.0, 64.0, 52))),
                  std::invalid_argument);  // clipped by the left edge
  CHECK_THROWS_AS(static_cast<void>(render_pair(one_human_spec(1, 64, 64, 52, 7))),
                  std::invalid_argument);  // no such posture
  CHECK_THROWS_AS(static_cast<void>(render_pair(one_human_spec(1, 64, 64, 4))),
                  std::invalid_argument);  // sub-renderable height
  SceneSpec s = one_human_spec(1);
  s.smoke_density = 1.5;
  CHECK_THROWS_AS(static_cast<void>(render_pair(s)), std::invalid_argument);
  SceneSpec s2 = one_human_spec(1);
  s2.heat_sources.push_back({2.0, 2.0, 10.0, 0.8});  // pokes out of frame
  CHECK_THROWS_AS(static_cast<void>(render_pair(s2)), std::invalid_argument);
  SceneSpec s3 = one_human_spec(1);
  s3.noise_sigma = -0.1;
  CHECK_THROWS_AS(static_cast<void>(render_pair(s3)), std::invalid_argument);
}

TEST_CASE("complementary corruptions defeat a brightness strawman per modality") {
  SceneSpec base;
  base.width = 128;
  base.height = 128;
  base.seed = 99;
  base.humans.push_back({40, 60, 48, 0});
  base.humans.push_back({90, 70, 40, 1});

  SceneSpec heavy_smoke = base;
  heavy_smoke.smoke_density = 0.9;
  SceneSpec heat = base;
  heat.smoke_density = 0.05;
  heat.heat_sources.push_back({20, 20, 12, 0.9});
  heat.heat_sources.push_back({105, 25, 11, 0.85});
  heat.heat_sources.push_back({64, 108, 12, 0.9});

  const RenderedPair p_clean = render_pair(base);
  const RenderedPair p_smoke = render_pair(heavy_smoke);
  const RenderedPair p_heat = render_pair(heat);

  // IR strawman margin (body brightness over background) collapses in smoke
  const double m_clean = mean_inside_boxes(p_clean.ir, p_clean.gt_boxes, true) -
                         mean_inside_boxes(p_clean.ir, p_clean.gt_boxes, false);
  const double m_smoke = mean_inside_boxes(p_smoke.ir, p_smoke.gt_boxes, true) -
                         mean_inside_boxes(p_smoke.ir, p_smoke.gt_boxes, false);
  CHECK(m_smoke < 0.5 * m_clean);

  // thermal strawman: bright mass outside the human boxes explodes with
  // heat distractors (identity rig, so frames coincide)
  const auto bright_outside = [](const RenderedPair& p) {
    long n = 0;
    for (int y = 0; y < p.thermal.height; ++y)
      for (int x = 0; x < p.thermal.width; ++x) {
        if (p.thermal.at(x, y) <= 0.5f) continue;
        bool in = false;
        for (const auto& b : p.gt_boxes) {
          if (std::abs(x - b.cx) <= b.w / 2 && std::abs(y - b.cy) <= b.h / 2) in = true;
        }
        if (!in) ++n;
      }
    return n;
  };
  const long fp_clean = bright_outside(p_clean);
  const long fp_heat = bright_outside(p_heat);
  CHECK(fp_clean < 40);
  CHECK(fp_heat > 150);
  CHECK(fp_heat > 5 * std::max(fp_clean, 1L));
}

}  // TEST_SUITE synth-render

TEST_SUITE("synth-chessboard") {

TEST_CASE("fronto-parallel board: full corner grid with uniform spacing") {
  calib::ChessboardSpec spec{6, 9, 25.0};
  geom::Intrinsics k{520, 520, 160, 120};
  geom::Pose pose;
  pose.t = {-(spec.inner_cols - 1) * 25.0 / 2, -(spec.inner_rows - 1) * 25.0 / 2, 600.0};
  const auto [image, obs] = render_chessboard(k, {}, pose, spec, 320, 240);
  REQUIRE(obs.corners.size() == 54);

  const double want = 520.0 * 25.0 / 600.0;
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c + 1 < 9; ++c) {
      const auto& a = obs.corners[static_cast<size_t>(r * 9 + c)];
      const auto& b = obs.corners[static_cast<size_t>(r * 9 + c + 1)];
      CHECK(std::abs((b.u - a.u) - want) < 1e-6);
      CHECK(std::abs(b.v - a.v) < 1e-6);
    }

  // render shows dark squares, light squares, and anti-aliased transition
  // values strictly between the flat shades (0.08 / 0.65 / 0.92)
  int dark = 0, light = 0, mid = 0;
  for (const float v : image.px) {
    dark += v < 0.2f;
    light += v > 0.8f;
    mid += v > 0.15f && v < 0.55f;
  }
  CHECK(dark > 2000);
  CHECK(light > 2000);
  CHECK(mid > 20);
}

TEST_CASE("barrel distortion pulls outer corners inward, matching the projection") {
  calib::ChessboardSpec spec{6, 9, 25.0};
  geom::Intrinsics k{520, 520, 160, 120};
  geom::Distortion d{-0.3, 0.0, 0.0, 0.0, 0.0};
  geom::Pose pose;
  pose.t = {-(spec.inner_cols - 1) * 25.0 / 2, -(spec.inner_rows - 1) * 25.0 / 2, 600.0};
  const auto [img0, obs0] = render_chessboard(k, {}, pose, spec, 320, 240);
  const auto [imgd, obsd] = render_chessboard(k, d, pose, spec, 320, 240);

  const std::vector<geom::WorldPoint> pts = calib::planar_target_points(spec);
  for (size_t i = 0; i < pts.size(); ++i) {
    const geom::PixelPoint want = geom::project(pts[i], pose, k, d);
    CHECK(std::abs(obsd.corners[i].u - want.u) < 1e-9);
    CHECK(std::abs(obsd.corners[i].v - want.v) < 1e-9);
  }
  for (const size_t i : {size_t{0}, size_t{8}, size_t{45}, size_t{53}}) {
    const double r0 = std::hypot(obs0.corners[i].u - 160.0, obs0.corners[i].v - 120.0);
    const double rd = std::hypot(obsd.corners[i].u - 160.0, obsd.corners[i].v - 120.0);
    CHECK(rd < r0);
  }
}

TEST_CASE("a board fully outside the view is rejected") {
  calib::ChessboardSpec spec{6, 9, 25.0};
  geom::Intrinsics k{520, 520, 160, 120};
  geom::Pose pose;
  pose.t = {5000.0, 0.0, 600.0};
  CHECK_THROWS_WITH_AS(static_cast<void>(render_chessboard(k, {}, pose, spec, 320, 240)),
                       doctest::Contains("outside"), std::invalid_argument);
}

}  // TEST_SUITE synth-chessboard

TEST_SUITE("synth-dataset") {

TEST_CASE("make_dataset writes the full layout and regenerates byte-identically") {
  namespace fs = std::filesystem;
  GeneratorConfig cfg;
  cfg.size = 96;
  cfg.min_humans = 1;
  cfg.max_humans = 2;
  cfg.master_seed = 2024;
  const std::string root_a = "synth_ds_a", root_b = "synth_ds_b";
  fs::remove_all(root_a);
  fs::remove_all(root_b);

  const DatasetSummary sa = make_dataset(10, cfg, root_a);
  CHECK(sa.frames == 10);
  CHECK(sa.split_counts[0] + sa.split_counts[1] + sa.split_counts[2] == 10);
  for (const char* sub : {"ir", "thermal", "labels"}) {
    int count = 0;
    for (const auto& e : fs::directory_iterator(fs::path(root_a) / sub)) {
      static_cast<void>(e);
      ++count;
    }
    CHECK(count == 10);
  }
  REQUIRE(fs::exists(sa.manifest_path));

  const DatasetSummary sb = make_dataset(10, cfg, root_b);
  for (int i = 0; i < 10; ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%05d", i);
    for (const std::string rel :
         {"ir/" + std::string(stem) + ".png", "thermal/" + std::string(stem) + ".png",
          "labels/" + std::string(stem) + ".txt"}) {
      CAPTURE(rel);
      CHECK(read_bytes((fs::path(root_a) / rel).string()) ==
            read_bytes((fs::path(root_b) / rel).string()));
    }
  }
  CHECK(read_bytes(sa.manifest_path) == read_bytes(sb.manifest_path));

  // manifest documents every frame and matches the split function
  const auto manifest = nlohmann::json::parse(read_bytes(sa.manifest_path));
  REQUIRE(manifest["frames"].size() == 10);
  CHECK(manifest["generator"]["master_seed"] == 2024);
  const char* names[3] = {"train", "val", "test"};
  for (const auto& jf : manifest["frames"]) {
    const int id = jf["id"];
    CHECK(jf["split"] == names[split_of_frame(cfg.master_seed, id)]);
    CHECK(jf["seed"] == frame_seed(cfg.master_seed, id));
  }

  // labels load back and agree with the manifest's box counts
  const auto& f0 = manifest["frames"][0];
  const int cw = f0["crop"]["w"], ch = f0["crop"]["h"];
  const auto boxes = align::load_labels((fs::path(root_a) / "labels" / "00000.txt").string(),
                                        cw, ch);
  CHECK(boxes.size() == f0["n_boxes"].get<size_t>());

  fs::remove_all(root_a);
  fs::remove_all(root_b);
}

TEST_CASE("complementary config alternates heavy smoke and heat distractors") {
  namespace fs = std::filesystem;
  GeneratorConfig cfg;
  cfg.size = 64;
  cfg.min_humans = 1;
  cfg.max_humans = 1;
  cfg.complementary = true;
  cfg.master_seed = 7;
  const std::string root = "synth_ds_c";
  fs::remove_all(root);
  static_cast<void>(make_dataset(6, cfg, root));
  const auto manifest = nlohmann::json::parse(read_bytes((fs::path(root) / "manifest.json").string()));
  for (const auto& jf : manifest["frames"]) {
    const int id = jf["id"];
    if (id % 2 == 0) {
      CHECK(jf["regime"] == "heavy_smoke");
      CHECK(jf["smoke_density"].get<double>() >= 0.65);
      CHECK(jf["heat_sources"].empty());
    } else {
      CHECK(jf["regime"] == "heat_distractors");
      CHECK(jf["smoke_density"].get<double>() <= 0.15);
      CHECK(jf["heat_sources"].size() >= 2);
    }
  }
  fs::remove_all(root);
}

TEST_CASE("dataset frames with different ids have different content") {
  namespace fs = std::filesystem;
  GeneratorConfig cfg;
  cfg.size = 64;
  cfg.min_humans = 1;
  cfg.max_humans = 3;
  cfg.master_seed = 11;
  const std::string root = "synth_ds_d";
  fs::remove_all(root);
  static_cast<void>(make_dataset(3, cfg, root));
  const std::string a = read_bytes((fs::path(root) / "ir" / "00000.png").string());
  const std::string b = read_bytes((fs::path(root) / "ir" / "00001.png").string());
  CHECK(a != b);
  fs::remove_all(root);
}

TEST_CASE("bad generator configuration is rejected") {
  GeneratorConfig cfg;
  cfg.min_humans = 3;
  cfg.max_humans = 1;
  CHECK_THROWS_AS(static_cast<void>(make_dataset(2, cfg, "synth_ds_bad")), std::invalid_argument);
  GeneratorConfig cfg2;
  CHECK_THROWS_AS(static_cast<void>(make_dataset(0, cfg2, "synth_ds_bad")), std::invalid_argument);
}

}  // TEST_SUITE synth-dataset
