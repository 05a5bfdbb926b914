#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "irfusion/alignment.hpp"
#include "irfusion/boxes.hpp"
#include "irfusion/calibration.hpp"
#include "irfusion/geometry.hpp"
#include "irfusion/image.hpp"

// Deterministic synthetic scene generator: paired IR/thermal renders of
// human-like figures with complementary modality corruptions, exact ground
// truth, and chessboard views for calibration work. Everything is a pure
// function of (spec, seed): per-pixel randomness comes from counter-based
// hashes so parallel render order can never change content.

namespace irfusion::synth {

// A figure is a stack of soft-edged ellipses (head/torso/limbs) scaled by
// `height` pixels; `posture` picks the layout variant (0 standing, 1 arms
// out, 2 crouched).
struct HumanSpec {
  double cx = 0.0;
  double cy = 0.0;
  double height = 0.0;
  int posture = 0;
};

// Thermal-only bright distractor with compact radial falloff.
struct HeatSource {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;
  double intensity = 0.0;
};

struct SceneSpec {
  int width = 128;
  int height = 128;
  std::vector<HumanSpec> humans;
  double smoke_density = 0.0;  // [0,1], IR-only corruption
  std::vector<HeatSource> heat_sources;
  geom::Homography thermal_to_ir;  // ground-truth rig homography
  geom::Intrinsics k_ir;           // rig bookkeeping, recorded in manifests
  geom::Intrinsics k_thermal;
  geom::Distortion d_ir;
  geom::Distortion d_thermal;
  double noise_sigma = 0.0;
  uint64_t seed = 0;
};

struct RenderedPair {
  img::GrayImage ir;                       // IR camera frame
  img::GrayImage thermal;                  // thermal camera's own frame
  std::vector<det::GroundTruthBox> gt_boxes;  // IR frame, one per human
  geom::Homography gt_homography;          // thermal -> IR, re-aligns thermal
};

// Renders the pair. Humans are bright in thermal and mid-gray textured in
// IR; smoke is a multiplicative low-frequency attenuation plus additive haze
// on IR only; heat sources appear in thermal only. The thermal image is the
// scene observed through the inverse rig homography, so warping it by
// gt_homography re-aligns it to the IR frame. Boxes bound each figure's
// analytic 0.5-support level.
RenderedPair render_pair(const SceneSpec& spec);

// Renders a chessboard seen by a camera with the given intrinsics,
// distortion, and pose (3x3 supersampled), and emits the exact projected
// inner-corner grid row-major, the order calibration expects.
std::pair<img::GrayImage, calib::CornerObservations> render_chessboard(
    const geom::Intrinsics& k, const geom::Distortion& d, const geom::Pose& pose,
    const calib::ChessboardSpec& spec, int width, int height);

struct GeneratorConfig {
  int size = 128;
  int min_humans = 0;
  int max_humans = 3;
  // complementary corruption: even frames heavy smoke / no heat sources, odd
  // frames light smoke / strong heat sources
  bool complementary = false;
  double smoke_max = 0.35;  // plain regime: smoke uniform in [0, smoke_max]
  double heat_prob = 0.5;   // plain regime: chance of mild heat sources
  double noise_sigma = 0.01;
  uint64_t master_seed = 1;
};

struct DatasetSummary {
  int frames = 0;
  std::array<int, 3> split_counts{0, 0, 0};  // train / val / test
  std::string manifest_path;
};

// Writes n_frames aligned pairs in the dataset layout
// (<root>/ir/NNNNN.png, <root>/thermal/NNNNN.png, <root>/labels/NNNNN.txt)
// plus <root>/manifest.json documenting every spec field, per-frame seed,
// and the 70/15/15 train/val/test split keyed by a seed-hashed frame id.
// Thermal is pre-aligned through the known rig homography and both modalities
// are cropped to their common region with labels propagated.
DatasetSummary make_dataset(int n_frames, const GeneratorConfig& cfg, const std::string& root);

// Split of one frame id under this master seed: 0 train, 1 val, 2 test.
int split_of_frame(uint64_t master_seed, int frame_id);

// Per-frame seed derivation (splitmix of master and index), exposed so tests
// and tools can reproduce a single frame.
uint64_t frame_seed(uint64_t master_seed, int frame_id);

}  // namespace irfusion::synth
