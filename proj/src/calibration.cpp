#include "irfusion/calibration.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace irfusion::calib {

std::vector<geom::WorldPoint> planar_target_points(const ChessboardSpec& spec) {
  if (spec.inner_rows < 1 || spec.inner_cols < 1 || spec.square_size <= 0.0) {
    throw std::invalid_argument("planar_target_points: invalid board spec");
  }
  std::vector<geom::WorldPoint> pts;
  pts.reserve(static_cast<size_t>(spec.inner_rows) * spec.inner_cols);
  for (int r = 0; r < spec.inner_rows; ++r) {
    for (int c = 0; c < spec.inner_cols; ++c) {
      pts.push_back({c * spec.square_size, r * spec.square_size, 0.0});
    }
  }
  return pts;
}

namespace {

// Absolute-conic constraint row for columns i, j of H, zero-skew basis
// b = [B11, B22, B13, B23, B33].
Eigen::Matrix<double, 5, 1> conic_row(const geom::Homography& h, int i, int j) {
  auto col = [&](int c) {
    return Eigen::Vector3d(h.h[0 + c], h.h[3 + c], h.h[6 + c]);
  };
  const Eigen::Vector3d hi = col(i), hj = col(j);
  Eigen::Matrix<double, 5, 1> v;
  v << hi(0) * hj(0),
       hi(1) * hj(1),
       hi(0) * hj(2) + hi(2) * hj(0),
       hi(1) * hj(2) + hi(2) * hj(1),
       hi(2) * hj(2);
  return v;
}

}  // namespace

geom::Intrinsics init_intrinsics_zhang(const std::vector<geom::Homography>& view_homographies) {
  const size_t n = view_homographies.size();
  if (n < 3) throw std::invalid_argument("init_intrinsics_zhang: at least 3 views required");

  Eigen::MatrixXd a(2 * n, 5);
  for (size_t i = 0; i < n; ++i) {
    const geom::Homography& h = view_homographies[i];
    a.row(2 * i) = conic_row(h, 0, 1).transpose();
    a.row(2 * i + 1) = (conic_row(h, 0, 0) - conic_row(h, 1, 1)).transpose();
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeFullV);
  const Eigen::VectorXd& s = svd.singularValues();
  if (s(3) < 1e-8 * s(0)) {
    throw std::runtime_error("init_intrinsics_zhang: degenerate view set");
  }
  Eigen::VectorXd b = svd.matrixV().col(4);
  if (b(0) < 0.0) b = -b;

  const double b11 = b(0), b22 = b(1), b13 = b(2), b23 = b(3), b33 = b(4);
  if (b11 <= 0.0 || b22 <= 0.0) {
    throw std::runtime_error("init_intrinsics_zhang: degenerate view set");
  }
  const double cx = -b13 / b11;
  const double cy = -b23 / b22;
  const double lambda = b33 + cx * b13 + cy * b23;
  if (!(lambda > 0.0)) {
    throw std::runtime_error("init_intrinsics_zhang: degenerate view set");
  }
  geom::Intrinsics k;
  k.fx = std::sqrt(lambda / b11);
  k.fy = std::sqrt(lambda / b22);
  k.cx = cx;
  k.cy = cy;
  if (!std::isfinite(k.fx) || !std::isfinite(k.fy) || !std::isfinite(k.cx) ||
      !std::isfinite(k.cy)) {
    throw std::runtime_error("init_intrinsics_zhang: degenerate view set");
  }
  return k;
}

geom::Pose init_extrinsics(const geom::Homography& h, const geom::Intrinsics& k) {
  if (k.fx <= 0.0 || k.fy <= 0.0) {
    throw std::invalid_argument("init_extrinsics: invalid intrinsics");
  }
  Eigen::Matrix3d km;
  km << k.fx, 0, k.cx, 0, k.fy, k.cy, 0, 0, 1;
  Eigen::Matrix3d hm;
  hm << h.h[0], h.h[1], h.h[2], h.h[3], h.h[4], h.h[5], h.h[6], h.h[7], h.h[8];
  const Eigen::Matrix3d g = km.inverse() * hm;

  const double norm1 = g.col(0).norm();
  if (norm1 < 1e-15) throw std::runtime_error("init_extrinsics: singular homography");
  const double scale = 1.0 / norm1;

  Eigen::Vector3d r1 = scale * g.col(0);
  Eigen::Vector3d r2 = scale * g.col(1);
  Eigen::Vector3d t = scale * g.col(2);
  if (t.z() < 0.0) {
    r1 = -r1;
    r2 = -r2;
    t = -t;
  }
  if (!(t.z() > 0.0)) throw std::runtime_error("init_extrinsics: board behind camera");

  const Eigen::Vector3d r3 = r1.cross(r2);
  std::array<double, 9> raw{r1.x(), r2.x(), r3.x(),
                            r1.y(), r2.y(), r3.y(),
                            r1.z(), r2.z(), r3.z()};
  geom::Pose pose;
  pose.r = geom::nearest_rotation(raw);
  pose.t = {t.x(), t.y(), t.z()};
  return pose;
}

namespace {

constexpr int kIntrinsicParams = 9;  // fx fy cx cy k1 k2 k3 p1 p2

std::vector<double> pack_parameters(const CalibrationResult& r) {
  std::vector<double> x;
  x.reserve(kIntrinsicParams + 6 * r.poses.size());
  x.push_back(r.intrinsics.fx);
  x.push_back(r.intrinsics.fy);
  x.push_back(r.intrinsics.cx);
  x.push_back(r.intrinsics.cy);
  x.push_back(r.distortion.k1);
  x.push_back(r.distortion.k2);
  x.push_back(r.distortion.k3);
  x.push_back(r.distortion.p1);
  x.push_back(r.distortion.p2);
  for (const geom::Pose& p : r.poses) {
    const auto aa = geom::axis_angle_from_rotation(p.r);
    x.insert(x.end(), aa.begin(), aa.end());
    x.insert(x.end(), p.t.begin(), p.t.end());
  }
  return x;
}

CalibrationResult unpack_parameters(const std::vector<double>& x, size_t views) {
  CalibrationResult r;
  r.intrinsics = {x[0], x[1], x[2], x[3]};
  r.distortion = {x[4], x[5], x[6], x[7], x[8]};
  r.poses.resize(views);
  for (size_t v = 0; v < views; ++v) {
    const size_t o = kIntrinsicParams + 6 * v;
    r.poses[v].r = geom::rotation_from_axis_angle({x[o], x[o + 1], x[o + 2]});
    r.poses[v].t = {x[o + 3], x[o + 4], x[o + 5]};
  }
  return r;
}

// Residual vector: (du, dv) per corner, views and corners in input order.
// Out-of-domain parameters (board behind camera) yield +inf entries so the
// containing trial step is rejected.
Eigen::VectorXd residuals(const std::vector<double>& x,
                          const std::vector<CornerObservations>& obs,
                          const std::vector<geom::WorldPoint>& board) {
  const size_t views = obs.size();
  const CalibrationResult model = unpack_parameters(x, views);
  Eigen::VectorXd r(2 * views * board.size());
  size_t at = 0;
  for (size_t v = 0; v < views; ++v) {
    for (size_t c = 0; c < board.size(); ++c) {
      try {
        const geom::PixelPoint p =
            geom::project(board[c], model.poses[v], model.intrinsics, model.distortion);
        r(at++) = p.u - obs[v].corners[c].u;
        r(at++) = p.v - obs[v].corners[c].v;
      } catch (const std::exception&) {
        r(at++) = std::numeric_limits<double>::infinity();
        r(at++) = std::numeric_limits<double>::infinity();
      }
    }
  }
  return r;
}

struct LmOutcome {
  std::vector<double> x;
  double cost = 0.0;
  bool damping_overflow = false;
};

// Levenberg-Marquardt with multiplicative damping on diag(J^T J), central
// difference Jacobians, and an accept-on-equal rule so an already optimal
// start converges immediately instead of starving the damping schedule.
LmOutcome lm_minimize(std::vector<double> x, const std::vector<CornerObservations>& obs,
                      const std::vector<geom::WorldPoint>& board,
                      const std::vector<int>& free_idx) {
  constexpr double kLambda0 = 1e-3;
  constexpr double kLambdaMax = 1e12;
  constexpr double kRelTol = 1e-12;
  constexpr int kMaxIter = 200;

  const auto cost_of = [&](const std::vector<double>& p) {
    const Eigen::VectorXd r = residuals(p, obs, board);
    const double c = r.squaredNorm();
    return std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
  };

  LmOutcome out;
  out.x = x;
  out.cost = cost_of(x);
  if (!std::isfinite(out.cost)) {
    throw std::runtime_error("refine_calibration: non-finite cost at the initial point");
  }

  const int nfree = static_cast<int>(free_idx.size());
  double lambda = kLambda0;

  for (int iter = 0; iter < kMaxIter; ++iter) {
    const Eigen::VectorXd r0 = residuals(x, obs, board);
    Eigen::MatrixXd j(r0.size(), nfree);
    for (int f = 0; f < nfree; ++f) {
      const int pi = free_idx[f];
      const double h = 1e-6 * std::max(1.0, std::abs(x[pi]));
      std::vector<double> xp = x, xm = x;
      xp[pi] += h;
      xm[pi] -= h;
      j.col(f) = (residuals(xp, obs, board) - residuals(xm, obs, board)) / (2.0 * h);
    }
    if (!j.allFinite()) {
      throw std::runtime_error("refine_calibration: non-finite Jacobian");
    }

    const Eigen::MatrixXd jtj = j.transpose() * j;
    const Eigen::VectorXd g = j.transpose() * r0;

    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd aug = jtj;
      for (int f = 0; f < nfree; ++f) {
        aug(f, f) += lambda * std::max(jtj(f, f), 1e-12);
      }
      const Eigen::VectorXd step = aug.ldlt().solve(-g);
      std::vector<double> xt = x;
      for (int f = 0; f < nfree; ++f) xt[free_idx[f]] += step(f);

      const double ct = cost_of(xt);
      if (ct <= out.cost) {
        const double rel = (out.cost - ct) / std::max(out.cost, 1e-300);
        x = xt;
        out.x = xt;
        const double prev = out.cost;
        out.cost = ct;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (rel < kRelTol || prev == 0.0) return out;
      } else {
        lambda *= 10.0;
        if (lambda > kLambdaMax) {
          out.damping_overflow = true;
          return out;
        }
      }
    }
  }
  return out;
}

std::vector<int> all_free(size_t params, bool freeze_k3) {
  std::vector<int> idx;
  for (size_t i = 0; i < params; ++i) {
    if (freeze_k3 && i == 6) continue;
    idx.push_back(static_cast<int>(i));
  }
  return idx;
}

CalibrationResult refine_pass(const CalibrationResult& init,
                              const std::vector<CornerObservations>& obs,
                              const ChessboardSpec& spec, bool freeze_k3) {
  if (init.poses.size() != obs.size()) {
    throw std::invalid_argument("refine_calibration: pose count != view count");
  }
  const std::vector<geom::WorldPoint> board = planar_target_points(spec);
  for (const CornerObservations& o : obs) {
    if (o.corners.size() != board.size()) {
      throw std::invalid_argument("refine_calibration: corner count mismatch in view " +
                                  o.view_id);
    }
  }

  std::vector<double> x0 = pack_parameters(init);
  const LmOutcome out = lm_minimize(std::move(x0), obs, board, all_free(
      kIntrinsicParams + 6 * init.poses.size(), freeze_k3));
  CalibrationResult refined = unpack_parameters(out.x, obs.size());
  refined.rms_reprojection =
      std::sqrt(out.cost / (static_cast<double>(obs.size()) * board.size()));
  if (out.damping_overflow) {
    std::ostringstream msg;
    msg << "refine_calibration: refinement diverged (best rms "
        << refined.rms_reprojection << " px)";
    throw std::runtime_error(msg.str());
  }
  return refined;
}

}  // namespace

CalibrationResult refine_calibration(const CalibrationResult& init,
                                     const std::vector<CornerObservations>& observations,
                                     const ChessboardSpec& spec) {
  return refine_pass(init, observations, spec, false);
}

double reprojection_rms(const CalibrationResult& result,
                        const std::vector<CornerObservations>& observations,
                        const ChessboardSpec& spec) {
  if (result.poses.size() != observations.size()) {
    throw std::invalid_argument("reprojection_rms: pose count != view count");
  }
  const std::vector<geom::WorldPoint> board = planar_target_points(spec);
  double acc = 0.0;
  size_t count = 0;
  for (size_t v = 0; v < observations.size(); ++v) {
    if (observations[v].corners.size() != board.size()) {
      throw std::invalid_argument("reprojection_rms: corner count mismatch in view " +
                                  observations[v].view_id);
    }
    for (size_t c = 0; c < board.size(); ++c) {
      const geom::PixelPoint p =
          geom::project(board[c], result.poses[v], result.intrinsics, result.distortion);
      const double du = p.u - observations[v].corners[c].u;
      const double dv = p.v - observations[v].corners[c].v;
      acc += du * du + dv * dv;
      ++count;
    }
  }
  return std::sqrt(acc / static_cast<double>(count));
}

CalibrationResult calibrate(const std::vector<CornerObservations>& observations,
                            const ChessboardSpec& spec) {
  if (observations.size() < 3) {
    throw std::invalid_argument("calibrate: at least 3 views required");
  }
  if (spec.inner_rows < 3 || spec.inner_cols < 3) {
    throw std::invalid_argument("calibrate: board must have at least 3x3 inner corners");
  }
  const std::vector<geom::WorldPoint> board = planar_target_points(spec);

  std::vector<geom::Homography> hs;
  hs.reserve(observations.size());
  for (const CornerObservations& o : observations) {
    if (o.corners.size() != board.size()) {
      throw std::invalid_argument("calibrate: corner count mismatch in view " + o.view_id);
    }
    std::vector<std::pair<geom::PixelPoint, geom::PixelPoint>> pairs;
    pairs.reserve(board.size());
    for (size_t c = 0; c < board.size(); ++c) {
      pairs.emplace_back(geom::PixelPoint{board[c].x, board[c].y}, o.corners[c]);
    }
    try {
      hs.push_back(geom::estimate_homography(pairs));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("calibrate: view " + o.view_id + ": " + e.what());
    }
  }

  CalibrationResult init;
  init.intrinsics = init_intrinsics_zhang(hs);
  init.distortion = {};
  init.poses.reserve(hs.size());
  for (size_t v = 0; v < hs.size(); ++v) {
    try {
      init.poses.push_back(init_extrinsics(hs[v], init.intrinsics));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("calibrate: view " + observations[v].view_id + ": " + e.what());
    }
  }
  init.rms_reprojection = reprojection_rms(init, observations, spec);

  const CalibrationResult pass1 = refine_pass(init, observations, spec, true);
  return refine_pass(pass1, observations, spec, false);
}

std::vector<CornerObservations> load_corners_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_corners_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line.rfind("view_id,corner_index,u,v", 0) != 0) {
    throw std::runtime_error("load_corners_csv: missing header in " + path);
  }
  std::vector<CornerObservations> views;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, idx, u, v;
    if (!std::getline(ss, id, ',') || !std::getline(ss, idx, ',') ||
        !std::getline(ss, u, ',') || !std::getline(ss, v)) {
      throw std::runtime_error("load_corners_csv: malformed line " + std::to_string(lineno));
    }
    size_t index;
    geom::PixelPoint p;
    try {
      index = std::stoul(idx);
      p.u = std::stod(u);
      p.v = std::stod(v);
    } catch (const std::exception&) {
      throw std::runtime_error("load_corners_csv: malformed line " + std::to_string(lineno));
    }
    auto it = std::find_if(views.begin(), views.end(),
                           [&](const CornerObservations& o) { return o.view_id == id; });
    if (it == views.end()) {
      views.push_back({id, {}});
      it = views.end() - 1;
    }
    if (it->corners.size() <= index) it->corners.resize(index + 1);
    it->corners[index] = p;
  }
  return views;
}

void save_corners_csv(const std::string& path,
                      const std::vector<CornerObservations>& observations) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_corners_csv: cannot open " + path);
  f << "view_id,corner_index,u,v\n";
  char buf[128];
  for (const CornerObservations& o : observations) {
    for (size_t i = 0; i < o.corners.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g,%.17g\n", o.view_id.c_str(), i,
                    o.corners[i].u, o.corners[i].v);
      f << buf;
    }
  }
}

void save_calibration_json(const std::string& path, const CalibrationResult& result) {
  nlohmann::ordered_json j;
  j["fx"] = result.intrinsics.fx;
  j["fy"] = result.intrinsics.fy;
  j["cx"] = result.intrinsics.cx;
  j["cy"] = result.intrinsics.cy;
  j["k1"] = result.distortion.k1;
  j["k2"] = result.distortion.k2;
  j["k3"] = result.distortion.k3;
  j["p1"] = result.distortion.p1;
  j["p2"] = result.distortion.p2;
  j["rms"] = result.rms_reprojection;
  j["views"] = nlohmann::ordered_json::array();
  for (const geom::Pose& p : result.poses) {
    const auto aa = geom::axis_angle_from_rotation(p.r);
    nlohmann::ordered_json v;
    v["rotation_axis_angle"] = {aa[0], aa[1], aa[2]};
    v["translation"] = {p.t[0], p.t[1], p.t[2]};
    j["views"].push_back(v);
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_calibration_json: cannot open " + path);
  f << j.dump(2) << "\n";
}

CalibrationResult load_calibration_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_calibration_json: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_calibration_json: " + std::string(e.what()));
  }
  CalibrationResult r;
  try {
    r.intrinsics = {j.at("fx"), j.at("fy"), j.at("cx"), j.at("cy")};
    r.distortion = {j.at("k1"), j.at("k2"), j.at("k3"), j.at("p1"), j.at("p2")};
    r.rms_reprojection = j.at("rms");
    for (const auto& v : j.at("views")) {
      geom::Pose p;
      const auto& aa = v.at("rotation_axis_angle");
      p.r = geom::rotation_from_axis_angle({aa.at(0), aa.at(1), aa.at(2)});
      const auto& t = v.at("translation");
      p.t = {t.at(0), t.at(1), t.at(2)};
      r.poses.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_calibration_json: missing field: " + std::string(e.what()));
  }
  return r;
}

}  // namespace irfusion::calib
