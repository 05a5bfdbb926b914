#include "irfusion/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "irfusion/nn/rng.hpp"
#include "json.hpp"

namespace irfusion::synth {

namespace {

// counter-based hashes: per-pixel randomness independent of evaluation order
uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t pixel_key(uint64_t seed, int x, int y, int tag) {
  uint64_t k = splitmix(seed ^ 0xa076'1d64'78bd'642fULL);
  k = splitmix(k ^ (static_cast<uint64_t>(static_cast<uint32_t>(x)) << 1));
  k = splitmix(k ^ (static_cast<uint64_t>(static_cast<uint32_t>(y)) << 33));
  return splitmix(k ^ static_cast<uint64_t>(tag));
}

double hash01(uint64_t seed, int x, int y, int tag) {
  return static_cast<double>(pixel_key(seed, x, y, tag) >> 11) * 0x1.0p-53;
}

double hash_normal(uint64_t seed, int x, int y, int tag) {
  const double u1 = std::max(hash01(seed, x, y, tag), 1e-300);
  const double u2 = hash01(seed, x, y, tag + 0x100);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

struct Ellipse {
  double ex, ey, a, b;
};

// figure layouts as fractions of the figure height
std::vector<Ellipse> figure_ellipses(const HumanSpec& h) {
  const double u = h.height;
  std::vector<Ellipse> es;
  switch (h.posture) {
    case 0:  // standing
      es = {{0.0, -0.40, 0.10, 0.10},
            {0.0, -0.08, 0.16, 0.26},
            {-0.08, 0.28, 0.075, 0.24},
            {0.08, 0.28, 0.075, 0.24}};
      break;
    case 1:  // arms out
      es = {{0.0, -0.40, 0.10, 0.10},
            {0.0, -0.08, 0.16, 0.26},
            {-0.08, 0.28, 0.075, 0.24},
            {0.08, 0.28, 0.075, 0.24},
            {-0.26, -0.14, 0.13, 0.05},
            {0.26, -0.14, 0.13, 0.05}};
      break;
    case 2:  // crouched
      es = {{0.0, -0.28, 0.11, 0.11},
            {0.0, 0.02, 0.22, 0.22},
            {-0.14, 0.30, 0.14, 0.12},
            {0.14, 0.30, 0.14, 0.12}};
      break;
    default:
      throw std::invalid_argument("render: posture variant must be 0, 1, or 2");
  }
  for (Ellipse& e : es) {
    e.ex = h.cx + e.ex * u;
    e.ey = h.cy + e.ey * u;
    e.a *= u;
    e.b *= u;
  }
  return es;
}

// soft-edged ellipse union; ~1.5 px transition at the boundary
double figure_support(double x, double y, const std::vector<Ellipse>& es) {
  double s = 0.0;
  for (const Ellipse& e : es) {
    const double dx = (x - e.ex) / e.a;
    const double dy = (y - e.ey) / e.b;
    const double r = std::sqrt(dx * dx + dy * dy);
    const double w = 1.5 / std::min(e.a, e.b);  // pixel width in r units
    s = std::max(s, std::clamp((1.0 - r) / w, 0.0, 1.0));
  }
  return s;
}

double heat_at(double x, double y, const std::vector<HeatSource>& hs) {
  double v = 0.0;
  for (const HeatSource& h : hs) {
    const double d2 = ((x - h.cx) * (x - h.cx) + (y - h.cy) * (y - h.cy)) / (h.radius * h.radius);
    if (d2 < 1.0) {
      const double f = 1.0 - d2;
      v = std::max(v, h.intensity * f * f);
    }
  }
  return v;
}

// low-frequency random field: 0.5 + four sinusoids, clamped to [0,1]
struct LowFreqField {
  std::array<double, 4> amp{}, kx{}, ky{}, phase{};

  static LowFreqField sample(nn::Rng& rng, int size) {
    LowFreqField f;
    for (int j = 0; j < 4; ++j) {
      const double cycles = rng.uniform(0.5, 2.5);
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      const double k = 2.0 * M_PI * cycles / size;
      f.amp[j] = 0.125;
      f.kx[j] = k * std::cos(theta);
      f.ky[j] = k * std::sin(theta);
      f.phase[j] = rng.uniform(0.0, 2.0 * M_PI);
    }
    return f;
  }

  double operator()(double x, double y) const {
    double v = 0.5;
    for (int j = 0; j < 4; ++j) v += amp[j] * std::sin(kx[j] * x + ky[j] * y + phase[j]);
    return std::clamp(v, 0.0, 1.0);
  }
};

void validate_spec(const SceneSpec& spec, const std::vector<std::vector<Ellipse>>& figures) {
  if (spec.width < 16 || spec.height < 16) {
    throw std::invalid_argument("render: image size must be at least 16x16");
  }
  if (spec.smoke_density < 0.0 || spec.smoke_density > 1.0) {
    throw std::invalid_argument("render: smoke_density must lie in [0,1]");
  }
  if (spec.noise_sigma < 0.0) throw std::invalid_argument("render: noise_sigma must be >= 0");
  for (size_t i = 0; i < spec.humans.size(); ++i) {
    if (spec.humans[i].height < 8.0) {
      throw std::invalid_argument("render: human " + std::to_string(i) +
                                  " height below 8 px is not renderable");
    }
    for (const Ellipse& e : figures[i]) {
      if (e.ex - e.a < 0.0 || e.ex + e.a > spec.width - 1.0 || e.ey - e.b < 0.0 ||
          e.ey + e.b > spec.height - 1.0) {
        throw std::invalid_argument("render: human " + std::to_string(i) +
                                    " extends outside the frame");
      }
    }
  }
  for (size_t i = 0; i < spec.heat_sources.size(); ++i) {
    const HeatSource& h = spec.heat_sources[i];
    if (h.radius <= 0.0 || h.intensity < 0.0 || h.intensity > 1.0) {
      throw std::invalid_argument("render: heat source " + std::to_string(i) +
                                  " has invalid radius or intensity");
    }
    if (h.cx - h.radius < 0.0 || h.cx + h.radius > spec.width - 1.0 || h.cy - h.radius < 0.0 ||
        h.cy + h.radius > spec.height - 1.0) {
      throw std::invalid_argument("render: heat source " + std::to_string(i) +
                                  " extends outside the frame");
    }
  }
}

}  // namespace

RenderedPair render_pair(const SceneSpec& spec) {
  std::vector<std::vector<Ellipse>> figures;
  figures.reserve(spec.humans.size());
  for (const HumanSpec& h : spec.humans) figures.push_back(figure_ellipses(h));
  validate_spec(spec, figures);

  nn::Rng rng(spec.seed);
  const LowFreqField atten = LowFreqField::sample(rng, std::max(spec.width, spec.height));
  const LowFreqField haze = LowFreqField::sample(rng, std::max(spec.width, spec.height));
  const double rho = spec.smoke_density;

  const auto support_all = [&](double x, double y) {
    double s = 0.0;
    for (const auto& f : figures) s = std::max(s, figure_support(x, y, f));
    return s;
  };

  RenderedPair out;
  out.gt_homography = spec.thermal_to_ir;
  out.ir = img::GrayImage(spec.width, spec.height);
  out.thermal = img::GrayImage(spec.width, spec.height);

#pragma omp parallel for schedule(static)
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const double s = support_all(x, y);
      // IR: textured mid-gray figure on a dark, faintly textured background.
      // Both textures fade to zero in a band around the silhouette, so for
      // s in [0.45, 0.55] the shade is exactly 0.15 + 0.40 s and the 0.35
      // intensity crossing coincides with the 0.5-support level the ground
      // truth boxes are computed from.
      const double btex = std::clamp((s - 0.55) / 0.20, 0.0, 1.0);
      const double gtex = std::clamp((0.45 - s) / 0.20, 0.0, 1.0);
      const double body = 0.55 + 0.16 * (hash01(spec.seed, x, y, 2) - 0.5) * btex;
      const double bg = 0.15 + 0.04 * (hash01(spec.seed, x, y, 3) - 0.5) * gtex;
      double ir = bg + (body - bg) * s;
      // smoke: multiplicative attenuation toward a low-frequency haze
      const double alpha = rho * (0.85 + 0.15 * atten(x, y));
      ir = ir * (1.0 - alpha) + alpha * (0.55 + 0.25 * haze(x, y));
      ir += spec.noise_sigma * hash_normal(spec.seed, x, y, 0);
      out.ir.at(x, y) = static_cast<float>(std::clamp(ir, 0.0, 1.0));

      // thermal: scene observed through the rig homography; bright bodies,
      // heat distractors, no smoke
      const geom::PixelPoint p =
          geom::apply_homography(spec.thermal_to_ir, {static_cast<double>(x),
                                                      static_cast<double>(y)});
      const double st = support_all(p.u, p.v);
      double th = 0.08 + 0.78 * st;
      th = std::max(th, 0.08 + heat_at(p.u, p.v, spec.heat_sources));
      th += spec.noise_sigma * hash_normal(spec.seed, x, y, 1);
      out.thermal.at(x, y) = static_cast<float>(std::clamp(th, 0.0, 1.0));
    }
  }

  // boxes bound each figure's analytic 0.5-support level on the pixel grid
  for (const auto& f : figures) {
    int minx = spec.width, maxx = -1, miny = spec.height, maxy = -1;
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        if (figure_support(x, y, f) >= 0.5) {
          minx = std::min(minx, x);
          maxx = std::max(maxx, x);
          miny = std::min(miny, y);
          maxy = std::max(maxy, y);
        }
      }
    }
    if (maxx < minx) continue;  // unreachable for validated specs
    det::GroundTruthBox b;
    b.cx = 0.5 * (minx + maxx);
    b.cy = 0.5 * (miny + maxy);
    b.w = maxx - minx + 1;
    b.h = maxy - miny + 1;
    b.class_id = 0;
    out.gt_boxes.push_back(b);
  }
  return out;
}

namespace {

double board_shade(double bx, double by, const calib::ChessboardSpec& spec) {
  const double sq = spec.square_size;
  const double x0 = -sq, x1 = spec.inner_cols * sq;
  const double y0 = -sq, y1 = spec.inner_rows * sq;
  const double margin = 0.6 * sq;
  if (bx < x0 - margin || bx > x1 + margin || by < y0 - margin || by > y1 + margin) {
    return 0.65;  // backdrop
  }
  if (bx < x0 || bx > x1 || by < y0 || by > y1) return 0.92;  // white border
  const long sx = static_cast<long>(std::floor(bx / sq));
  const long sy = static_cast<long>(std::floor(by / sq));
  return ((sx + sy) % 2 + 2) % 2 == 0 ? 0.08 : 0.92;
}

}  // namespace

std::pair<img::GrayImage, calib::CornerObservations> render_chessboard(
    const geom::Intrinsics& k, const geom::Distortion& d, const geom::Pose& pose,
    const calib::ChessboardSpec& spec, int width, int height) {
  const std::vector<geom::WorldPoint> pts = calib::planar_target_points(spec);

  calib::CornerObservations obs;
  obs.view_id = "synthetic";
  obs.corners.reserve(pts.size());
  bool any_visible = false;
  for (const geom::WorldPoint& w : pts) {
    const geom::PixelPoint p = geom::project(w, pose, k, d);
    obs.corners.push_back(p);
    if (p.u >= 0.0 && p.u <= width - 1.0 && p.v >= 0.0 && p.v <= height - 1.0) {
      any_visible = true;
    }
  }
  if (!any_visible) {
    throw std::invalid_argument("render_chessboard: board projects fully outside the image");
  }

  const bool distortion_free = d.k1 == 0.0 && d.k2 == 0.0 && d.p1 == 0.0 && d.p2 == 0.0 &&
                               d.k3 == 0.0;
  img::GrayImage image(width, height);
#pragma omp parallel for schedule(static)
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      double acc = 0.0;
      for (int sv = -1; sv <= 1; ++sv) {
        for (int su = -1; su <= 1; ++su) {
          const geom::PixelPoint pix{u + su / 3.0, v + sv / 3.0};
          geom::NormalizedPoint n = geom::to_normalized(pix, k);
          if (!distortion_free) n = geom::undistort_point(n, d);
          // ray (n.x, n.y, 1) meets the board plane: columns [r1 r2 -dir]
          const auto& r = pose.r;
          const double m[9] = {r[0], r[1], -n.x, r[3], r[4], -n.y, r[6], r[7], -1.0};
          const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
                             m[1] * (m[3] * m[8] - m[5] * m[6]) +
                             m[2] * (m[3] * m[7] - m[4] * m[6]);
          if (std::abs(det) < 1e-15) {
            acc += 0.65;
            continue;
          }
          const double bx = -pose.t[0], by = -pose.t[1], bz = -pose.t[2];
          const double X = (bx * (m[4] * m[8] - m[5] * m[7]) - m[1] * (by * m[8] - m[5] * bz) +
                            m[2] * (by * m[7] - m[4] * bz)) /
                           det;
          const double Y = (m[0] * (by * m[8] - m[5] * bz) - bx * (m[3] * m[8] - m[5] * m[6]) +
                            m[2] * (m[3] * bz - by * m[6])) /
                           det;
          const double S = (m[0] * (m[4] * bz - by * m[7]) - m[1] * (m[3] * bz - by * m[6]) +
                            bx * (m[3] * m[7] - m[4] * m[6])) /
                           det;
          acc += S > 1e-9 ? board_shade(X, Y, spec) : 0.65;
        }
      }
      image.at(u, v) = static_cast<float>(acc / 9.0);
    }
  }
  return {std::move(image), std::move(obs)};
}

uint64_t frame_seed(uint64_t master_seed, int frame_id) {
  return splitmix(master_seed ^ splitmix(static_cast<uint64_t>(frame_id) + 1));
}

int split_of_frame(uint64_t master_seed, int frame_id) {
  // FNV-1a over the master seed and frame id bytes
  uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) {
      h ^= (v >> (8 * i)) & 0xffULL;
      h *= 0x100000001b3ULL;
    }
  };
  mix(master_seed, 8);
  mix(static_cast<uint64_t>(static_cast<uint32_t>(frame_id)), 4);
  const uint64_t bucket = h % 100;
  if (bucket < 70) return 0;
  if (bucket < 85) return 1;
  return 2;
}

DatasetSummary make_dataset(int n_frames, const GeneratorConfig& cfg, const std::string& root) {
  if (n_frames < 1) throw std::invalid_argument("make_dataset: n_frames must be >= 1");
  if (cfg.size < 32) throw std::invalid_argument("make_dataset: size must be >= 32");
  if (cfg.min_humans < 0 || cfg.max_humans < cfg.min_humans) {
    throw std::invalid_argument("make_dataset: bad human count range");
  }

  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"ir", "thermal", "labels"}) {
    fs::create_directories(fs::path(root) / sub, ec);
    if (ec) {
      throw std::runtime_error("make_dataset: cannot create " + (fs::path(root) / sub).string() +
                               ": " + ec.message());
    }
  }

  nlohmann::ordered_json manifest;
  manifest["generator"] = {{"size", cfg.size},
                           {"min_humans", cfg.min_humans},
                           {"max_humans", cfg.max_humans},
                           {"complementary", cfg.complementary},
                           {"smoke_max", cfg.smoke_max},
                           {"heat_prob", cfg.heat_prob},
                           {"noise_sigma", cfg.noise_sigma},
                           {"master_seed", cfg.master_seed},
                           {"n_frames", n_frames},
                           {"split", "70/15/15 by FNV-1a(master_seed, frame_id) mod 100"}};
  manifest["frames"] = nlohmann::ordered_json::array();

  DatasetSummary summary;
  summary.frames = n_frames;

  const double sz = cfg.size;
  for (int i = 0; i < n_frames; ++i) {
    SceneSpec spec;
    spec.width = cfg.size;
    spec.height = cfg.size;
    spec.seed = frame_seed(cfg.master_seed, i);
    spec.noise_sigma = cfg.noise_sigma;
    nn::Rng rng(spec.seed);

    const int n_h =
        cfg.min_humans +
        static_cast<int>(rng.uniform_index(static_cast<uint64_t>(cfg.max_humans - cfg.min_humans + 1)));
    for (int hidx = 0; hidx < n_h; ++hidx) {
      HumanSpec h;
      h.height = rng.uniform(0.22, 0.50) * sz;
      h.posture = static_cast<int>(rng.uniform_index(3));
      const double mx = 0.40 * h.height + 2.0;
      const double my = 0.53 * h.height + 2.0;
      h.cx = rng.uniform(mx, sz - 1.0 - mx);
      h.cy = rng.uniform(my, sz - 1.0 - my);
      spec.humans.push_back(h);
    }

    std::string regime = "plain";
    if (cfg.complementary) {
      if (i % 2 == 0) {
        regime = "heavy_smoke";
        spec.smoke_density = rng.uniform(0.65, 0.95);
      } else {
        regime = "heat_distractors";
        spec.smoke_density = rng.uniform(0.0, 0.15);
        const int n_heat = 2 + static_cast<int>(rng.uniform_index(2));
        for (int j = 0; j < n_heat; ++j) {
          HeatSource hs;
          hs.radius = rng.uniform(7.0, 14.0);
          hs.intensity = rng.uniform(0.75, 0.95);
          hs.cx = rng.uniform(hs.radius + 1.0, sz - 2.0 - hs.radius);
          hs.cy = rng.uniform(hs.radius + 1.0, sz - 2.0 - hs.radius);
          spec.heat_sources.push_back(hs);
        }
      }
    } else {
      spec.smoke_density = rng.uniform(0.0, cfg.smoke_max);
      if (rng.uniform() < cfg.heat_prob) {
        const int n_heat = 1 + static_cast<int>(rng.uniform_index(2));
        for (int j = 0; j < n_heat; ++j) {
          HeatSource hs;
          hs.radius = rng.uniform(5.0, 10.0);
          hs.intensity = rng.uniform(0.4, 0.7);
          hs.cx = rng.uniform(hs.radius + 1.0, sz - 2.0 - hs.radius);
          hs.cy = rng.uniform(hs.radius + 1.0, sz - 2.0 - hs.radius);
          spec.heat_sources.push_back(hs);
        }
      }
    }

    // mild random rig homography about the frame center, thermal -> IR
    {
      const double theta = rng.uniform(-0.05, 0.05);
      const double scale = rng.uniform(0.97, 1.03);
      const double tx = rng.uniform(-3.0, 3.0);
      const double ty = rng.uniform(-3.0, 3.0);
      const double p1 = rng.uniform(-5e-5, 5e-5);
      const double p2 = rng.uniform(-5e-5, 5e-5);
      const double c = (sz - 1.0) / 2.0;
      const double ct = scale * std::cos(theta), st = scale * std::sin(theta);
      // T(c) * [[ct,-st,tx],[st,ct,ty],[p1,p2,1]] * T(-c)
      const geom::Homography m{{ct, -st, tx, st, ct, ty, p1, p2, 1.0}};
      const geom::Homography tc{{1, 0, c, 0, 1, c, 0, 0, 1}};
      const geom::Homography tcinv{{1, 0, -c, 0, 1, -c, 0, 0, 1}};
      spec.thermal_to_ir = geom::multiply(tc, geom::multiply(m, tcinv));
    }

    const RenderedPair pair = render_pair(spec);

    const img::GrayImage warped =
        align::align_thermal_to_ir(pair.thermal, pair.gt_homography, cfg.size, cfg.size);
    const std::vector<uint8_t> mask =
        img::warp_valid_mask(pair.gt_homography, cfg.size, cfg.size, cfg.size, cfg.size);
    const align::AlignedPair ap = align::crop_common(pair.ir, warped, mask);
    const std::vector<det::GroundTruthBox> boxes = align::propagate_labels(pair.gt_boxes, ap.crop);

    char stem[16];
    std::snprintf(stem, sizeof stem, "%05d", i);
    const std::string ir_path = (fs::path(root) / "ir" / (std::string(stem) + ".png")).string();
    const std::string th_path =
        (fs::path(root) / "thermal" / (std::string(stem) + ".png")).string();
    const std::string lb_path =
        (fs::path(root) / "labels" / (std::string(stem) + ".txt")).string();
    img::save_png(ir_path, ap.ir);
    img::save_png(th_path, ap.thermal_warped);
    align::save_labels(lb_path, boxes, ap.crop.w, ap.crop.h);

    const int split = split_of_frame(cfg.master_seed, i);
    ++summary.split_counts[static_cast<size_t>(split)];
    static const char* kSplitNames[3] = {"train", "val", "test"};

    nlohmann::ordered_json jf;
    jf["id"] = i;
    jf["stem"] = stem;
    jf["seed"] = spec.seed;
    jf["split"] = kSplitNames[split];
    jf["regime"] = regime;
    jf["smoke_density"] = spec.smoke_density;
    jf["noise_sigma"] = spec.noise_sigma;
    jf["humans"] = nlohmann::ordered_json::array();
    for (const HumanSpec& h : spec.humans) {
      jf["humans"].push_back(
          {{"cx", h.cx}, {"cy", h.cy}, {"height", h.height}, {"posture", h.posture}});
    }
    jf["heat_sources"] = nlohmann::ordered_json::array();
    for (const HeatSource& h : spec.heat_sources) {
      jf["heat_sources"].push_back(
          {{"cx", h.cx}, {"cy", h.cy}, {"radius", h.radius}, {"intensity", h.intensity}});
    }
    jf["homography"] = spec.thermal_to_ir.h;
    jf["crop"] = {{"x", ap.crop.x}, {"y", ap.crop.y}, {"w", ap.crop.w}, {"h", ap.crop.h}};
    jf["n_boxes"] = boxes.size();
    manifest["frames"].push_back(std::move(jf));
  }

  summary.manifest_path = (fs::path(root) / "manifest.json").string();
  std::FILE* f = std::fopen(summary.manifest_path.c_str(), "wb");
  if (!f) {
    throw std::runtime_error("make_dataset: cannot write " + summary.manifest_path);
  }
  const std::string text = manifest.dump(2);
  std::fwrite(text.data(), 1, text.size(), f);
  std::fputc('\n', f);
  std::fclose(f);
  return summary;
}

}  // namespace irfusion::synth
