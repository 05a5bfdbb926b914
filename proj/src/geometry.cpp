#include "irfusion/geometry.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace irfusion::geom {

namespace {

Eigen::Matrix3d to_eigen(const std::array<double, 9>& m) {
  Eigen::Matrix3d e;
  e << m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8];
  return e;
}

std::array<double, 9> from_eigen(const Eigen::Matrix3d& e) {
  return {e(0, 0), e(0, 1), e(0, 2), e(1, 0), e(1, 1), e(1, 2), e(2, 0), e(2, 1), e(2, 2)};
}

}  // namespace

Homography Homography::normalized() const {
  double norm = 0.0;
  for (double v : h) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw std::invalid_argument("homography: zero matrix");
  double sign = 1.0;
  if (h[8] > 0.0) {
    sign = 1.0;
  } else if (h[8] < 0.0) {
    sign = -1.0;
  } else {
    for (double v : h) {
      if (v != 0.0) {
        sign = v > 0.0 ? 1.0 : -1.0;
        break;
      }
    }
  }
  Homography out;
  for (int i = 0; i < 9; ++i) out.h[i] = sign * h[i] / norm;
  return out;
}

Homography Homography::inverse() const {
  const Eigen::Matrix3d m = to_eigen(h);
  const double d = m.determinant();
  if (std::abs(d) < 1e-300) throw std::runtime_error("homography: not invertible");
  Homography out;
  out.h = from_eigen(m.inverse().eval());
  return out;
}

double Homography::det() const { return to_eigen(h).determinant(); }

Homography multiply(const Homography& a, const Homography& b) {
  Homography out;
  out.h = from_eigen((to_eigen(a.h) * to_eigen(b.h)).eval());
  return out;
}

bool is_rotation(const std::array<double, 9>& r, double tol) {
  const Eigen::Matrix3d m = to_eigen(r);
  const double ortho = (m.transpose() * m - Eigen::Matrix3d::Identity()).norm();
  return ortho <= tol && std::abs(m.determinant() - 1.0) <= tol;
}

std::array<double, 9> rotation_from_axis_angle(const std::array<double, 3>& aa) {
  const double theta = std::sqrt(aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]);
  if (theta < 1e-14) {
    // First-order expansion keeps the map smooth through zero.
    Eigen::Matrix3d k;
    k << 0, -aa[2], aa[1], aa[2], 0, -aa[0], -aa[1], aa[0], 0;
    return from_eigen((Eigen::Matrix3d::Identity() + k).eval());
  }
  const double x = aa[0] / theta, y = aa[1] / theta, z = aa[2] / theta;
  Eigen::Matrix3d k;
  k << 0, -z, y, z, 0, -x, -y, x, 0;
  const Eigen::Matrix3d r =
      Eigen::Matrix3d::Identity() + std::sin(theta) * k + (1.0 - std::cos(theta)) * (k * k);
  return from_eigen(r);
}

std::array<double, 3> axis_angle_from_rotation(const std::array<double, 9>& r) {
  const Eigen::Matrix3d m = to_eigen(r);
  Eigen::AngleAxisd aa(m);
  const Eigen::Vector3d v = aa.angle() * aa.axis();
  return {v.x(), v.y(), v.z()};
}

std::array<double, 9> nearest_rotation(const std::array<double, 9>& m) {
  const Eigen::Matrix3d e = to_eigen(m);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return from_eigen(r);
}

NormalizedPoint to_normalized(const PixelPoint& p, const Intrinsics& k) {
  return {(p.u - k.cx) / k.fx, (p.v - k.cy) / k.fy};
}

PixelPoint to_pixel(const NormalizedPoint& p, const Intrinsics& k) {
  return {k.fx * p.x + k.cx, k.fy * p.y + k.cy};
}

NormalizedPoint distort(const NormalizedPoint& p, const Distortion& d) {
  const double x = p.x, y = p.y;
  const double r2 = x * x + y * y;
  const double radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3));
  const double xd = x * radial + 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x);
  const double yd = y * radial + d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y;
  return {xd, yd};
}

NormalizedPoint undistort_point(const NormalizedPoint& p_distorted, const Distortion& d) {
  constexpr int kMaxIter = 20;
  constexpr double kStepTol = 1e-10;
  double x = p_distorted.x, y = p_distorted.y;
  for (int i = 0; i < kMaxIter; ++i) {
    const double r2 = x * x + y * y;
    const double radial = 1.0 + r2 * (d.k1 + r2 * (d.k2 + r2 * d.k3));
    const double dx = 2.0 * d.p1 * x * y + d.p2 * (r2 + 2.0 * x * x);
    const double dy = d.p1 * (r2 + 2.0 * y * y) + 2.0 * d.p2 * x * y;
    const double xn = (p_distorted.x - dx) / radial;
    const double yn = (p_distorted.y - dy) / radial;
    const double step = std::abs(xn - x) + std::abs(yn - y);
    x = xn;
    y = yn;
    if (step < kStepTol) return {x, y};
  }
  std::ostringstream msg;
  msg << "undistort_point: no convergence at (" << p_distorted.x << ", " << p_distorted.y << ")";
  throw std::runtime_error(msg.str());
}

PixelPoint project(const WorldPoint& w, const Pose& pose, const Intrinsics& k,
                   const Distortion& d) {
  const auto& r = pose.r;
  const double xc = r[0] * w.x + r[1] * w.y + r[2] * w.z + pose.t[0];
  const double yc = r[3] * w.x + r[4] * w.y + r[5] * w.z + pose.t[1];
  const double zc = r[6] * w.x + r[7] * w.y + r[8] * w.z + pose.t[2];
  if (!(zc > 0.0)) throw std::invalid_argument("project: point behind camera");
  const NormalizedPoint nd = distort({xc / zc, yc / zc}, d);
  return to_pixel(nd, k);
}

PixelPoint apply_homography(const Homography& h, const PixelPoint& p) {
  const auto& m = h.h;
  const double w = m[6] * p.u + m[7] * p.v + m[8];
  if (std::abs(w) < 1e-12) throw std::runtime_error("apply_homography: point at infinity");
  return {(m[0] * p.u + m[1] * p.v + m[2]) / w, (m[3] * p.u + m[4] * p.v + m[5]) / w};
}

namespace {

struct Normalizer {
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};

// Translate centroid to origin and scale the mean distance to sqrt(2).
Normalizer hartley(const std::vector<PixelPoint>& pts) {
  Normalizer n;
  double mu = 0.0, mv = 0.0;
  for (const auto& p : pts) {
    mu += p.u;
    mv += p.v;
  }
  mu /= static_cast<double>(pts.size());
  mv /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += std::hypot(p.u - mu, p.v - mv);
  mean_dist /= static_cast<double>(pts.size());
  n.scale = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
  n.tx = -n.scale * mu;
  n.ty = -n.scale * mv;
  return n;
}

Eigen::Matrix3d normalizer_matrix(const Normalizer& n) {
  Eigen::Matrix3d t;
  t << n.scale, 0, n.tx, 0, n.scale, n.ty, 0, 0, 1;
  return t;
}

}  // namespace

Homography estimate_homography(const std::vector<std::pair<PixelPoint, PixelPoint>>& pairs) {
  const size_t n = pairs.size();
  if (n < 4) throw std::invalid_argument("estimate_homography: at least 4 pairs required");

  std::vector<PixelPoint> src(n), dst(n);
  for (size_t i = 0; i < n; ++i) {
    src[i] = pairs[i].first;
    dst[i] = pairs[i].second;
  }
  const Normalizer ns = hartley(src);
  const Normalizer nd = hartley(dst);

  Eigen::MatrixXd a(2 * n, 9);
  for (size_t i = 0; i < n; ++i) {
    const double x = ns.scale * src[i].u + ns.tx;
    const double y = ns.scale * src[i].v + ns.ty;
    const double xp = nd.scale * dst[i].u + nd.tx;
    const double yp = nd.scale * dst[i].v + nd.ty;
    a.row(2 * i) << x, y, 1, 0, 0, 0, -xp * x, -xp * y, -xp;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -yp * x, -yp * y, -yp;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeFullV);
  const Eigen::VectorXd& s = svd.singularValues();
  const int m = static_cast<int>(s.size());
  // Rank must be 8 so that the null direction is unique.
  if (m >= 8 && s(7) < 1e-10 * s(0)) {
    throw std::runtime_error("estimate_homography: degenerate correspondences");
  }
  if (m >= 9 && s(8) > 0.99 * s(7)) {
    throw std::runtime_error("estimate_homography: degenerate correspondences");
  }

  const Eigen::VectorXd hvec = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << hvec(0), hvec(1), hvec(2), hvec(3), hvec(4), hvec(5), hvec(6), hvec(7), hvec(8);
  const Eigen::Matrix3d h =
      normalizer_matrix(nd).inverse() * hn * normalizer_matrix(ns);

  Homography out;
  out.h = from_eigen(h);
  return out.normalized();
}

void save_homography(const std::string& path, const Homography& h) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_homography: cannot open " + path);
  char buf[64];
  for (int i = 0; i < 9; ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", h.h[i]);
    f << buf << (i % 3 == 2 ? '\n' : ' ');
  }
}

Homography load_homography(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_homography: cannot open " + path);
  Homography h;
  for (int i = 0; i < 9; ++i) {
    if (!(f >> h.h[i])) throw std::runtime_error("load_homography: malformed file " + path);
  }
  return h;
}

}  // namespace irfusion::geom
