// Orthographic projection and the closed-form ridge-regression camera fit.
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "dne/geometry.hpp"

namespace dne {

struct Camera {
  double sx = 1.0;
  double sy = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};

struct RidgeConfig {
  double xi = 0.0;
};

inline Vec2 project(const Vec3& v, const Camera& c) {
  return {c.sx * v.x + c.tx, c.sy * v.y + c.ty};
}

inline void project_all(std::span<const Vec3> vs, const Camera& c, std::vector<Vec2>& out) {
  out.resize(vs.size());
  for (std::size_t i = 0; i < vs.size(); ++i) out[i] = project(vs[i], c);
}

inline std::vector<Vec2> project_all(std::span<const Vec3> vs, const Camera& c) {
  std::vector<Vec2> out;
  project_all(vs, c, out);
  return out;
}

inline double projection_residual(std::span<const Vec3> vertices,
                                  std::span<const Vec2> coords_2d, const Camera& c) {
  if (vertices.size() != coords_2d.size())
    throw std::invalid_argument("projection_residual: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const Vec2 d = coords_2d[i] - project(vertices[i], c);
    acc += d.x * d.x + d.y * d.y;
  }
  return acc;
}

namespace ridge_detail {

// One axis of the fit. Solves (A + xi I) w = b where A is the 2x2 Gram
// matrix of the design [coord, 1]; keeps the inverse for backprop.
struct AxisFit {
  double s = 0.0, t = 0.0;
  double inv00 = 0.0, inv01 = 0.0, inv11 = 0.0;  // (A + xi I)^-1, symmetric
};

template <class GetX, class GetU>
AxisFit solve_axis(std::size_t n, GetX&& x, GetU&& u, double xi) {
  double sxx = 0.0, sx = 0.0, sxu = 0.0, su = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double xi_ = x(i);
    const double ui_ = u(i);
    sxx += xi_ * xi_;
    sx += xi_;
    sxu += xi_ * ui_;
    su += ui_;
  }
  const double a00 = sxx + xi;
  const double a01 = sx;
  const double a11 = static_cast<double>(n) + xi;
  const double det = a00 * a11 - a01 * a01;
  if (std::abs(det) <= 1e-12) throw std::runtime_error("correct_camera: singular system");
  AxisFit f;
  f.inv00 = a11 / det;
  f.inv01 = -a01 / det;
  f.inv11 = a00 / det;
  f.s = f.inv00 * sxu + f.inv01 * su;
  f.t = f.inv01 * sxu + f.inv11 * su;
  return f;
}

}  // namespace ridge_detail

struct CameraFitTape {
  ridge_detail::AxisFit x, y;
};

inline Camera correct_camera(std::span<const Vec3> vertices, std::span<const Vec2> coords_2d,
                             const RidgeConfig& cfg, CameraFitTape* tape = nullptr) {
  if (vertices.size() != coords_2d.size())
    throw std::invalid_argument("correct_camera: size mismatch");
  if (vertices.size() < 2) throw std::invalid_argument("correct_camera: underdetermined");
  if (!(cfg.xi >= 0.0) || !std::isfinite(cfg.xi))
    throw std::invalid_argument("correct_camera: xi must be finite and non-negative");
  const std::size_t n = vertices.size();
  const auto fx = ridge_detail::solve_axis(
      n, [&](std::size_t i) { return vertices[i].x; },
      [&](std::size_t i) { return coords_2d[i].x; }, cfg.xi);
  const auto fy = ridge_detail::solve_axis(
      n, [&](std::size_t i) { return vertices[i].y; },
      [&](std::size_t i) { return coords_2d[i].y; }, cfg.xi);
  if (tape) {
    tape->x = fx;
    tape->y = fy;
  }
  return Camera{fx.s, fy.s, fx.t, fy.t};
}

// Reverse-mode gradients of the fit: given dL/d(camera), accumulates
// dL/d(vertices) and dL/d(coords_2d). Derived from implicit differentiation
// of (A + xi I) w = b per axis.
inline void camera_fit_backward(const CameraFitTape& tape, std::span<const Vec3> vertices,
                                std::span<const Vec2> coords_2d, double d_sx, double d_sy,
                                double d_tx, double d_ty, std::vector<Vec3>& d_vertices,
                                std::vector<Vec2>& d_coords) {
  const std::size_t n = vertices.size();
  // q = (A + xi I)^-1 * upstream, per axis
  const double qx0 = tape.x.inv00 * d_sx + tape.x.inv01 * d_tx;
  const double qx1 = tape.x.inv01 * d_sx + tape.x.inv11 * d_tx;
  const double qy0 = tape.y.inv00 * d_sy + tape.y.inv01 * d_ty;
  const double qy1 = tape.y.inv01 * d_sy + tape.y.inv11 * d_ty;
  for (std::size_t i = 0; i < n; ++i) {
    const double vx = vertices[i].x;
    const double vy = vertices[i].y;
    const double ux = coords_2d[i].x;
    const double uy = coords_2d[i].y;
    d_coords[i].x += qx0 * vx + qx1;
    d_coords[i].y += qy0 * vy + qy1;
    d_vertices[i].x += qx0 * (ux - 2.0 * tape.x.s * vx - tape.x.t) - qx1 * tape.x.s;
    d_vertices[i].y += qy0 * (uy - 2.0 * tape.y.s * vy - tape.y.t) - qy1 * tape.y.s;
  }
}

}  // namespace dne
